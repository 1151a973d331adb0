"""Supervised and contrastive training loops, the optimizer, and model
selection.

Supervised training maximizes a reference-based metric (max
cross-correlation by default) between the predicted pulse and the ground
truth.  Contrastive training needs no labels: each anchor clip is
frequency-resampled into a faster "negative" clip, the negative's predicted
pulse is resampled back into a "positive", and the multi-view triplet loss
pulls anchor/positive spectra together while pushing the anchor/negative
pair apart.  Model selection is label-free in contrastive mode (lowest
irrelevant power ratio on the training set).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Recording, SampledClip, iter_eval_windows, sample_clip
from .graph import Graph
from .losses import (
    LossValue,
    MvtlConfig,
    ipr,
    mcc_grad,
    mvtl_grad,
    pearson_grad,
    snr_grad,
)
from .models import (
    EstimatorConfig,
    PulseModel,
    build,
    check_clip_shape,
    clip_to_input,
    input_to_clip_grad,
    predict_ppg,
    save_model,
)
from .resample import draw_ratio, resample_frames_with_vjp, resample_signal_with_vjp
from .saliency import (
    SaliencyMap,
    build_saliency_net,
    sparsity_loss_grad,
    temporal_loss_grad,
    warp_with_vjp,
)
from .spectral import NoInBandSignal, PpgSignal, estimate_hr
from .video import VideoClip

logger = logging.getLogger(__name__)

SUPERVISED_LOSSES = ("mcc", "pearson", "snr")


@dataclass(frozen=True)
class TrainConfig:
    """Training settings; defaults mirror the full-scale recipe."""

    mode: str = "contrastive"
    loss: str = "mcc"  # supervised metric: mcc | pearson | snr
    batch: int = 4
    epochs: int = 100
    lr: float = 1e-5
    weight_decay: float = 0.01
    window_s: float = 10.0
    num_views: int = 4
    view_len_s: float = 5.0
    saliency: bool = False
    sparsity_weight: float = 1.0
    temporal_weight: float = 1.0
    augment: bool = True
    ratio_lo: float = 0.66
    ratio_hi: float = 0.80
    desync_max_s: float = 0.0
    warp_sigma: float | None = None
    saliency_width: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("supervised", "contrastive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss not in SUPERVISED_LOSSES:
            raise ValueError(f"unknown supervised loss {self.loss!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.view_len_s > self.window_s:
            raise ValueError("view_len_s must not exceed window_s")

    def mvtl_config(self) -> MvtlConfig:
        return MvtlConfig(num_views=self.num_views, view_len_s=self.view_len_s)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, lr: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
                   ) -> dict[str, np.ndarray]:
    """One adaptive-moment update with decoupled weight decay.

    Decay is applied directly to the parameters (factor ``1 - lr*decay``),
    never through the gradients.  Parameters with non-finite gradients keep
    their previous value (the decay is skipped too) and are logged.
    """
    state.t += 1
    t = state.t
    out = {}
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if not np.all(np.isfinite(grad)):
            logger.warning("skipping update for %s: non-finite gradient", name)
            out[name] = param
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * grad * grad
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        out[name] = param - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * param
    return out


class AdamW:
    """Stateful wrapper around :func:`optimizer_step` for a set of graphs."""

    def __init__(self, lr: float, weight_decay: float = 0.01):
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def step(self, graph: Graph, grads: dict[str, np.ndarray], prefix: str = "") -> None:
        names = graph.trainable_param_names()
        params = {prefix + n: graph.params[n] for n in names}
        scoped = {prefix + n: grads[n] for n in names if n in grads}
        updated = optimizer_step(params, scoped, self.state, self.lr, self.weight_decay)
        graph.update_params({n: updated[prefix + n] for n in names})


def _accumulate(total: dict, grads: dict, scale: float = 1.0) -> None:
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + g * scale
        else:
            total[name] = g * scale


def _saliency_forward(saliency_net: Graph, clip: VideoClip, sigma):
    """Warp a clip by its own saliency; returns everything backward needs."""
    x = clip_to_input(clip)
    logits_out, tape = saliency_net.forward_tape(x)
    smap = SaliencyMap(logits_out[:, 0])
    warped, warp_vjp = warp_with_vjp(clip, smap, sigma)
    return warped, smap, tape, warp_vjp


def _saliency_backward(saliency_net: Graph, tape, d_map: np.ndarray):
    grads, _ = saliency_net.backward_tape(tape, d_map[:, None, :, :])
    return grads


def _regularizer_terms(smap: SaliencyMap, cfg: TrainConfig):
    s_val, s_grad = sparsity_loss_grad(smap)
    t_val, t_grad = temporal_loss_grad(smap)
    value = cfg.sparsity_weight * s_val + cfg.temporal_weight * t_val
    grad = cfg.sparsity_weight * s_grad + cfg.temporal_weight * t_grad
    return value, grad


def _supervised_loss_grad(cfg: TrainConfig, sample: SampledClip, prediction: PpgSignal):
    """Negative metric and its gradient w.r.t. the prediction samples."""
    gt = sample.ppg
    if gt is None:
        raise ValueError("supervised training needs ground-truth PPG")
    if cfg.loss == "mcc":
        value, grad = mcc_grad(gt, prediction)
    elif cfg.loss == "pearson":
        value, grad = pearson_grad(gt, prediction)
    else:
        if sample.hr is not None:
            hr_ref = float(np.mean(sample.hr))
        else:
            hr_ref = estimate_hr(gt)
        value, grad = snr_grad(prediction, hr_ref)
    return -value, -grad


def step_supervised(model: PulseModel, batch: list[SampledClip], cfg: TrainConfig,
                    opt: AdamW) -> LossValue:
    """One optimizer step on a batch: loss = -metric (+ saliency terms)."""
    graph = model.graph
    total_grads: dict[str, np.ndarray] = {}
    sal_grads: dict[str, np.ndarray] = {}
    losses = []
    used = 0
    for sample in batch:
        clip = sample.video
        check_clip_shape(model.config, clip)
        if model.saliency_net is not None:
            warped, smap, sal_tape, warp_vjp = _saliency_forward(
                model.saliency_net, clip, model.warp_sigma)
        else:
            warped = clip
        x = clip_to_input(warped)
        out, tape = graph.forward_tape(x)
        prediction = PpgSignal(out.reshape(-1), clip.fps)
        try:
            loss_val, d_pred = _supervised_loss_grad(cfg, sample, prediction)
        except (ValueError, NoInBandSignal) as exc:
            logger.warning("skipping sample: %s", exc)
            continue
        used += 1
        grads, d_input = graph.backward_tape(tape, d_pred.reshape(out.shape))
        _accumulate(total_grads, grads)
        if model.saliency_net is not None:
            reg_val, d_map_reg = _regularizer_terms(smap, cfg)
            loss_val += reg_val
            d_frames, d_map_warp = warp_vjp(input_to_clip_grad(d_input))
            _accumulate(sal_grads,
                        _saliency_backward(model.saliency_net, sal_tape,
                                           d_map_warp + d_map_reg))
        losses.append(loss_val)
    if not used:
        logger.warning("entire batch skipped")
        return LossValue(value=0.0, components={"skipped": float(len(batch))})
    scale = 1.0 / used
    opt.step(graph, {k: v * scale for k, v in total_grads.items()}, prefix="est.")
    if model.saliency_net is not None and sal_grads:
        opt.step(model.saliency_net, {k: v * scale for k, v in sal_grads.items()},
                 prefix="sal.")
    return LossValue(value=float(np.mean(losses)),
                     components={"skipped": float(len(batch) - used)})


def contrastive_forward(model: PulseModel, clip: VideoClip, ratio: float):
    """The three PPG branches of one contrastive pass (no gradients).

    Returns (anchor, positive, negative) signals cropped to a common length;
    used by diagnostics and the frequency-contrast invariant tests.
    """
    multiple = model.config.t_multiple
    warped = clip
    if model.saliency_net is not None:
        from .saliency import compute_map, warp
        warped = warp(clip, compute_map(model.saliency_net, clip), model.warp_sigma)
    neg_frames = _crop_multiple(_resample_frames(warped.frames, ratio), multiple)
    y_a = predict_ppg(model.graph, warped, model.config)
    y_n = predict_ppg(model.graph, VideoClip(neg_frames, clip.fps), model.config)
    y_p = resample_signal_with_vjp(y_n, 1.0 / ratio)[0]
    n = min(len(y_a), len(y_p), len(y_n))
    crop = lambda s: PpgSignal(s.samples[:n], s.fs)
    return crop(y_a), crop(y_p), crop(y_n)


def _resample_frames(frames: np.ndarray, ratio: float) -> np.ndarray:
    out, _ = resample_frames_with_vjp(frames, ratio)
    return out


def _crop_multiple(frames: np.ndarray, multiple: int) -> np.ndarray:
    t = frames.shape[0]
    keep = t - t % multiple
    return frames[:keep]


def step_contrastive(model: PulseModel, batch: list[SampledClip], cfg: TrainConfig,
                     opt: AdamW, rng: np.random.Generator) -> LossValue:
    """One optimizer step of frequency-contrastive training.

    Per sample: warp (optional), resample the clip by a drawn ratio into the
    negative branch, run the estimator on both, resample the negative pulse
    back into the positive, and apply the multi-view triplet loss.  Gradient
    flows through both estimator branches, the pulse resampler, and the
    warp.  Degenerate (constant-output) samples are skipped; more than half
    skipped raises.
    """
    graph = model.graph
    multiple = model.config.t_multiple
    total_grads: dict[str, np.ndarray] = {}
    sal_grads: dict[str, np.ndarray] = {}
    losses = []
    p_tots = []
    n_tots = []
    used = 0
    for sample in batch:
        clip = sample.video
        check_clip_shape(model.config, clip)
        ratio = draw_ratio(rng, cfg.ratio_lo, cfg.ratio_hi)
        if model.saliency_net is not None:
            warped, smap, sal_tape, warp_vjp = _saliency_forward(
                model.saliency_net, clip, model.warp_sigma)
        else:
            warped = clip
        neg_frames_full, resample_vjp = resample_frames_with_vjp(warped.frames, ratio)
        neg_frames = _crop_multiple(neg_frames_full, multiple)

        x_a = clip_to_input(VideoClip(warped.frames, clip.fps))
        x_n = clip_to_input(VideoClip(neg_frames, clip.fps))
        out_a, tape_a = graph.forward_tape(x_a)
        out_n, tape_n = graph.forward_tape(x_n)
        y_a = PpgSignal(out_a.reshape(-1), clip.fps)
        y_n = PpgSignal(out_n.reshape(-1), clip.fps)
        y_p_full, pos_vjp = resample_signal_with_vjp(y_n, 1.0 / ratio)
        n = min(len(y_a), len(y_p_full), len(y_n))
        crop = lambda s: PpgSignal(s.samples[:n], s.fs)
        try:
            value, da, dp, dn = mvtl_grad(crop(y_a), crop(y_p_full), crop(y_n),
                                          cfg.mvtl_config(), rng)
        except (ValueError, NoInBandSignal) as exc:
            logger.warning("skipping sample: %s", exc)
            continue
        used += 1
        losses.append(value.value)
        p_tots.append(value.components["p_tot"])
        n_tots.append(value.components["n_tot"])

        d_ya = np.zeros(len(y_a))
        d_ya[:n] = da
        d_yp = np.zeros(len(y_p_full))
        d_yp[:n] = dp
        d_yn = np.zeros(len(y_n))
        d_yn[:n] = dn
        d_yn += pos_vjp(d_yp)

        grads_a, dx_a = graph.backward_tape(tape_a, d_ya.reshape(out_a.shape))
        grads_n, dx_n = graph.backward_tape(tape_n, d_yn.reshape(out_n.shape))
        _accumulate(total_grads, grads_a)
        _accumulate(total_grads, grads_n)

        if model.saliency_net is not None:
            d_warped = input_to_clip_grad(dx_a)
            d_neg_full = np.zeros_like(neg_frames_full)
            d_neg_full[:neg_frames.shape[0]] = input_to_clip_grad(dx_n)
            d_warped = d_warped + resample_vjp(d_neg_full)
            reg_val, d_map_reg = _regularizer_terms(smap, cfg)
            losses[-1] += reg_val
            d_frames, d_map_warp = warp_vjp(d_warped)
            _accumulate(sal_grads,
                        _saliency_backward(model.saliency_net, sal_tape,
                                           d_map_warp + d_map_reg))
    if used * 2 < len(batch):
        raise RuntimeError(f"degenerate batch: {len(batch) - used}/{len(batch)} samples skipped")
    scale = 1.0 / used
    opt.step(graph, {k: v * scale for k, v in total_grads.items()}, prefix="est.")
    if model.saliency_net is not None and sal_grads:
        opt.step(model.saliency_net, {k: v * scale for k, v in sal_grads.items()},
                 prefix="sal.")
    return LossValue(value=float(np.mean(losses)),
                     components={"p_tot": float(np.mean(p_tots)),
                                 "n_tot": float(np.mean(n_tots)),
                                 "skipped": float(len(batch) - used)})


def select_model(history: list[float]) -> int:
    """Index of the best (lowest-metric) epoch; ties go to the earlier one."""
    best = None
    best_idx = None
    for i, value in enumerate(history):
        if value is None or not np.isfinite(value):
            continue
        if best is None or value < best:
            best = value
            best_idx = i
    if best_idx is None:
        raise ValueError("no finite metric in history")
    return best_idx


@dataclass
class TrainResult:
    model: PulseModel
    history: list[dict]
    best_epoch: int
    out_dir: Path | None = None


def _mean_val_metric(model: PulseModel, recordings, cfg: TrainConfig) -> float:
    """Supervised validation metric: mean negative MCC over fixed windows."""
    values = []
    for rec in recordings:
        gt_full = rec.ppg
        if gt_full is None:
            continue
        for start, clip in iter_eval_windows(rec, cfg.window_s,
                                             multiple=model.config.t_multiple):
            gt = PpgSignal(gt_full.samples[start:start + clip.num_frames], rec.fps)
            try:
                value, _ = mcc_grad(gt, model.predict(clip))
            except ValueError:
                continue
            values.append(-value)
    return float(np.mean(values)) if values else float("nan")


def _mean_train_ipr(model: PulseModel, recordings, cfg: TrainConfig) -> float:
    """Label-free selection metric: mean IPR of predictions over fixed windows."""
    values = []
    for rec in recordings:
        for _, clip in iter_eval_windows(rec, cfg.window_s,
                                         multiple=model.config.t_multiple):
            try:
                values.append(ipr(model.predict(clip)))
            except ValueError:
                values.append(1.0)
    return float(np.mean(values)) if values else float("nan")


def train(train_recs: list[Recording], val_recs: list[Recording],
          model_cfg: EstimatorConfig, cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Full training run with per-epoch logging, checkpoints, and selection.

    Contrastive mode folds the validation recordings into training (no
    labels are read anywhere, audited by the recordings' access counters)
    and selects the epoch with the lowest training-set IPR.  Supervised mode
    trains on ``train_recs`` only and selects on validation MCC.
    """
    rng = np.random.default_rng(cfg.seed)
    model = PulseModel(
        graph=build(model_cfg, rng),
        config=model_cfg,
        saliency_net=(build_saliency_net(model_cfg.in_channels, cfg.saliency_width, rng)
                      if cfg.saliency else None),
        warp_sigma=cfg.warp_sigma,
    )
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    contrastive = cfg.mode == "contrastive"
    pool = list(train_recs) + (list(val_recs) if contrastive else [])
    if not pool:
        raise ValueError("no training recordings")
    steps = max(1, int(np.ceil(len(pool) / cfg.batch)))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(
            "\n".join(f"{k}={v}" for k, v in sorted(vars(cfg).items())) + "\n")
        (out_dir / "checkpoints").mkdir(exist_ok=True)

    history: list[dict] = []
    metrics: list[float] = []
    best_metric = np.inf
    best_params = {k: v.copy() for k, v in model.graph.params.items()}
    best_sal = ({k: v.copy() for k, v in model.saliency_net.params.items()}
                if model.saliency_net is not None else None)
    best_epoch = 0

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        epoch_losses = []
        for _ in range(steps):
            batch = []
            for _ in range(cfg.batch):
                rec = pool[int(rng.integers(0, len(pool)))]
                offset = 0.0
                if not contrastive and cfg.desync_max_s > 0:
                    offset = float(rng.uniform(-cfg.desync_max_s, cfg.desync_max_s))
                batch.append(sample_clip(rec, cfg.window_s, rng, augment=cfg.augment,
                                         with_labels=not contrastive,
                                         gt_offset_s=offset))
            if contrastive:
                loss = step_contrastive(model, batch, cfg, opt, rng)
            else:
                loss = step_supervised(model, batch, cfg, opt)
            epoch_losses.append(loss.value)
        train_ipr = _mean_train_ipr(model, pool, cfg)
        if contrastive:
            val_metric = train_ipr
        else:
            val_metric = _mean_val_metric(model, val_recs, cfg)
        metrics.append(val_metric)
        wall = time.perf_counter() - tic
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
               "val_metric": val_metric, "train_ipr": train_ipr, "wall_s": wall}
        history.append(row)
        if np.isfinite(val_metric) and val_metric < best_metric:
            best_metric = val_metric
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.graph.params.items()}
            if model.saliency_net is not None:
                best_sal = {k: v.copy() for k, v in model.saliency_net.params.items()}
        if out_dir is not None:
            model.graph.save(out_dir / "checkpoints" / f"epoch_{epoch:03d}.plck")
            if model.saliency_net is not None:
                model.saliency_net.save(out_dir / "checkpoints" / f"saliency_{epoch:03d}.plck")

    assert select_model(metrics) == best_epoch
    model.graph.update_params(best_params)
    if model.saliency_net is not None and best_sal is not None:
        model.saliency_net.update_params(best_sal)

    if out_dir is not None:
        with open(out_dir / "log.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_metric",
                                                   "train_ipr", "wall_s"])
            writer.writeheader()
            for row in history:
                writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v)
                                 for k, v in row.items()})
        save_model(out_dir / "model", model)
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       out_dir=out_dir)
