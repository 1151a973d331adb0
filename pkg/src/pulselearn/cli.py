"""Command-line surface: synth, train, eval, desync-bench, interp-bench,
audit-hr-stability.

Every subcommand takes --seed and writes CSV outputs into a run directory.
With --check, threshold failures exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    SynthSpec,
    audit_hr_stability,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .evaluate import (
    DesyncSpec,
    desync_bench,
    eval_hr,
    interpretability_bench,
    write_hr_csv,
)
from .models import EstimatorConfig, load_model
from .training import TrainConfig, train

CHECK_FAILED = 2


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=0)


def _add_synth_args(parser):
    parser.add_argument("--count", type=int, default=20)
    parser.add_argument("--duration-s", type=float, default=60.0)
    parser.add_argument("--fps", type=float, default=30.0)
    parser.add_argument("--height", type=int, default=32)
    parser.add_argument("--width", type=int, default=32)
    parser.add_argument("--channels", type=int, default=1)
    parser.add_argument("--region", type=int, nargs=4, default=(12, 12, 8, 8),
                        metavar=("Y", "X", "H", "W"))
    parser.add_argument("--hr-lo", type=float, default=60.0)
    parser.add_argument("--hr-hi", type=float, default=120.0)
    parser.add_argument("--drift-bpm-s", type=float, default=0.2)
    parser.add_argument("--amplitude", type=float, default=0.05)
    parser.add_argument("--noise-std", type=float, default=0.05)
    parser.add_argument("--nuisance-region", type=int, nargs=4, default=None,
                        metavar=("Y", "X", "H", "W"))
    parser.add_argument("--nuisance-amplitude", type=float, default=None)


def _synth_specs(args, rng):
    specs = []
    for _ in range(args.count):
        specs.append(SynthSpec(
            duration_s=args.duration_s, fps=args.fps, height=args.height,
            width=args.width, channels=args.channels, region=tuple(args.region),
            base_hr=float(rng.uniform(args.hr_lo, args.hr_hi)),
            drift_bpm_s=args.drift_bpm_s, amplitude=args.amplitude,
            noise_std=args.noise_std,
            nuisance_region=(tuple(args.nuisance_region)
                             if args.nuisance_region else None),
            nuisance_amplitude=args.nuisance_amplitude,
        ))
    return specs


def _add_train_args(parser):
    parser.add_argument("--mode", choices=("contrastive", "supervised"),
                        default="contrastive")
    parser.add_argument("--loss", choices=("mcc", "pearson", "snr"), default="mcc")
    parser.add_argument("--variant", choices=("spatial_pool", "physnet_mini"),
                        default="spatial_pool")
    parser.add_argument("--model-channels", type=int, default=8,
                        help="physnet_mini channel width")
    parser.add_argument("--blocks", type=int, default=2)
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--lr", type=float, default=1e-5)
    parser.add_argument("--weight-decay", type=float, default=0.01)
    parser.add_argument("--window-s", type=float, default=10.0)
    parser.add_argument("--num-views", type=int, default=4)
    parser.add_argument("--view-len-s", type=float, default=5.0)
    parser.add_argument("--saliency", action="store_true")
    parser.add_argument("--sparsity-weight", "--w-s", type=float, default=1.0)
    parser.add_argument("--temporal-weight", "--w-t", type=float, default=1.0)
    parser.add_argument("--no-augment", action="store_true")
    parser.add_argument("--val-count", type=int, default=2,
                        help="recordings held out for validation")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        mode=args.mode, loss=args.loss, batch=args.batch, epochs=args.epochs,
        lr=args.lr, weight_decay=args.weight_decay, window_s=args.window_s,
        num_views=args.num_views, view_len_s=args.view_len_s,
        saliency=args.saliency, sparsity_weight=args.sparsity_weight,
        temporal_weight=args.temporal_weight, augment=not args.no_augment,
        seed=args.seed)


def _model_config(args, recordings) -> EstimatorConfig:
    t, h, w, c = recordings[0].video.frames.shape
    return EstimatorConfig(variant=args.variant, channels=args.model_channels,
                           blocks=args.blocks, in_channels=c, height=h, width=w)


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    recordings = [synth_generate(spec, rng) for spec in _synth_specs(args, rng)]
    save_dataset(args.out, recordings)
    print(f"wrote {len(recordings)} recordings to {args.out}")
    return 0


def cmd_train(args) -> int:
    recordings = load_dataset(args.data)
    val_count = min(args.val_count, max(len(recordings) - 1, 0))
    split = len(recordings) - val_count
    result = train(recordings[:split], recordings[split:],
                   _model_config(args, recordings), _train_config(args),
                   out_dir=args.out)
    best = result.history[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val_metric={best['val_metric']:.4g} "
          f"train_ipr={best['train_ipr']:.4g}")
    print(f"model saved under {args.out}/model")
    return 0


def cmd_eval(args) -> int:
    model = load_model(Path(args.model) / "model" if (Path(args.model) / "model").exists()
                       else args.model)
    recordings = load_dataset(args.data)
    result = eval_hr(model, recordings, window_s=args.window_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_hr_csv(out / "hr_eval.csv", result)
    print(f"windows={len(result.windows)} rmse={result.rmse:.3f} "
          f"mae={result.mae:.3f} pc={result.pc:.3f} failures={result.failures}")
    if args.check and args.check_mae is not None and result.mae > args.check_mae:
        print(f"CHECK FAILED: mae {result.mae:.3f} > {args.check_mae}")
        return CHECK_FAILED
    return 0


def cmd_desync_bench(args) -> int:
    recordings = load_dataset(args.data)
    n = len(recordings)
    n_test = max(1, int(round(n * 0.25)))
    n_val = max(1, int(round(n * 0.15)))
    test_recs = recordings[n - n_test:]
    val_recs = recordings[n - n_test - n_val:n - n_test]
    train_recs = recordings[:n - n_test - n_val]
    spec = DesyncSpec(o_max_list=tuple(args.o_max), losses=tuple(args.losses))
    cfg = _train_config(args)
    rows = desync_bench(train_recs, val_recs, test_recs,
                        _model_config(args, recordings), cfg, spec, out_dir=args.out)
    by = {(r["loss"], r["o_max_s"]): r["rmse"] for r in rows}
    for row in rows:
        print(f"{row['loss']:8s} o_max={row['o_max_s']:4.0f}s "
              f"rmse={row['rmse']:7.3f} mae={row['mae']:7.3f} pc={row['pc']:6.3f}")
    if args.check:
        o_list = sorted(set(o for _, o in by))
        ok = True
        if "mcc" in args.losses and len(o_list) > 1:
            ok &= by[("mcc", o_list[-1])] <= by[("mcc", 0.0)] + 2.0
        if "pearson" in args.losses and 8.0 in o_list:
            ok &= by[("pearson", 8.0)] > by[("pearson", 0.0)] + 3.0
        if "snr" in args.losses and "mcc" in args.losses:
            ok &= all(by[("snr", o)] >= by[("mcc", o)] for o in o_list)
        if not ok:
            print("CHECK FAILED: desynchronization robustness shape not met")
            return CHECK_FAILED
    return 0


def cmd_interp_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    pulse_region = tuple(args.region)
    nuisance_region = tuple(args.nuisance_region or (2, 20, 6, 6))
    rows = []
    for scenario, amplitude in (("nuisance_only", 0.0), ("with_pulse", args.amplitude)):
        spec = SynthSpec(
            duration_s=args.duration_s, fps=args.fps, height=args.height,
            width=args.width, channels=args.channels, region=pulse_region,
            base_hr=90.0, drift_bpm_s=args.drift_bpm_s, amplitude=amplitude,
            noise_std=args.noise_std, nuisance_region=nuisance_region,
            nuisance_amplitude=args.nuisance_amplitude or args.amplitude or 0.05)
        recordings = []
        for _ in range(args.count):
            base_hr = float(rng.uniform(args.hr_lo, args.hr_hi))
            recordings.append(synth_generate(replace(spec, base_hr=base_hr), rng))
        modes = ("contrastive",) if scenario == "nuisance_only" else ("supervised",)
        cfg = _train_config(args)
        out = interpretability_bench(recordings, _model_config(args, recordings), cfg,
                                     pulse_region, nuisance_region, modes=modes)
        for row in out:
            row["scenario"] = scenario
            rows.append(row)
            print(f"{scenario:14s} {row['mode']:12s} {row['region']:9s} "
                  f"mass={row['mass']:.3f}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "saliency_mass.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["mode", "region", "mass"])
        writer.writeheader()
        for row in rows:
            writer.writerow({"mode": f"{row['scenario']}/{row['mode']}",
                             "region": row["region"], "mass": f"{row['mass']:.6g}"})
    if args.check:
        masses = {(r["scenario"], r["mode"], r["region"]): r["mass"] for r in rows}
        ok = masses[("nuisance_only", "contrastive", "nuisance")] > 0.5
        ok &= (masses[("with_pulse", "supervised", "pulse")]
               > masses[("with_pulse", "supervised", "nuisance")])
        if not ok:
            print("CHECK FAILED: interpretability masses not met")
            return CHECK_FAILED
    return 0


def cmd_audit(args) -> int:
    recordings = load_dataset(args.data)
    report = audit_hr_stability(recordings, deltas_s=tuple(args.deltas))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "hr_stability.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["delta_s", "q05", "q50", "q95"])
        for delta, (q05, q50, q95) in sorted(report.items()):
            writer.writerow([delta, f"{q05:.6g}", f"{q50:.6g}", f"{q95:.6g}"])
            print(f"delta={delta:5.1f}s  q05={q05:.3f}  median={q50:.3f}  q95={q95:.3f}")
    if args.check:
        q50_10s = report.get(10.0, (0, np.inf, 0))[1]
        if q50_10s > 2.5:
            print(f"CHECK FAILED: 10s median HR variation {q50_10s:.2f} > 2.5 bpm")
            return CHECK_FAILED
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pulselearn",
        description="Contrastive and supervised pulse-from-video training "
                    "on synthetic benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    _add_synth_args(p)
    _add_seed(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_args(p)
    _add_seed(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="windowed heart-rate evaluation")
    p.add_argument("--model", required=True, help="run or model directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-s", type=float, default=10.0)
    p.add_argument("--check", action="store_true")
    p.add_argument("--check-mae", type=float, default=None)
    _add_seed(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("desync-bench",
                       help="loss robustness to ground-truth desynchronization")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--o-max", type=float, nargs="+", default=(0.0, 2.0, 4.0, 8.0, 16.0))
    p.add_argument("--losses", nargs="+", default=("pearson", "snr", "mcc"),
                   choices=("pearson", "snr", "mcc"))
    p.add_argument("--check", action="store_true")
    _add_train_args(p)
    _add_seed(p)
    p.set_defaults(fn=cmd_desync_bench)

    p = sub.add_parser("interp-bench", help="nuisance-flasher localization study")
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true")
    _add_synth_args(p)
    _add_train_args(p)
    _add_seed(p)
    p.set_defaults(fn=cmd_interp_bench)

    p = sub.add_parser("audit-hr-stability",
                       help="heart-rate variation quantiles over time offsets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deltas", type=float, nargs="+", default=(2.5, 5.0, 10.0, 15.0))
    p.add_argument("--check", action="store_true")
    _add_seed(p)
    p.set_defaults(fn=cmd_audit)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
