"""Training losses and validation metrics for pulse signals.

All metrics are band-limited to the 40-250 bpm heart-rate range and
amplitude-invariant.  The differentiable ones (`mcc`, `psd_mse`, `mvtl`,
`pearson`, `snr`) come with `*_grad` companions returning analytic
gradients with respect to the sample values, verified against finite
differences in the test suite.

Metric cheat sheet:

* ``pearson`` - plain correlation; assumes perfect temporal alignment.
* ``mcc``     - maximum cross-correlation: band-passed normalized
  cross-correlation maximized over temporal offsets and scaled by the
  in-band power ratio of the prediction.  Supervised training minimizes
  its negative.
* ``snr``     - in-dB ratio of power near the reference heart-rate bin to
  all remaining power.
* ``ipr``     - irrelevant power ratio, the out-of-band power fraction; a
  label-free quality metric.
* ``psd_mse`` - MSE between unit-sum band-masked power spectra; the
  contrastive distance.
* ``mvtl``    - multi-view triplet loss over psd_mse distances between
  subwindow views of anchor/positive/negative branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import BPM_BAND, LOSS_PAD_FACTOR, PpgSignal, power_spectrum

SNR_CAP_DB = 80.0


@dataclass(frozen=True)
class MvtlConfig:
    """Multi-view triplet loss settings: view count and view length."""

    num_views: int = 4
    view_len_s: float = 5.0
    pad_factor: int = LOSS_PAD_FACTOR

    def __post_init__(self):
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if self.view_len_s <= 0:
            raise ValueError("view_len_s must be positive")


@dataclass
class LossValue:
    """A scalar loss plus an optional named breakdown of its parts."""

    value: float
    components: dict[str, float] | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite loss value {self.value}")


def _check_pair(a: PpgSignal, b: PpgSignal, same_fs: bool = True) -> None:
    if len(a) != len(b):
        raise ValueError(f"signal lengths differ: {len(a)} vs {len(b)}")
    if same_fs and a.fs != b.fs:
        raise ValueError(f"sampling rates differ: {a.fs} vs {b.fs}")


def _full_band_mask(m: int, fs: float, band=BPM_BAND) -> np.ndarray:
    """Inclusive band mask over all two-sided FFT bins (|f| within band)."""
    freqs = np.abs(np.fft.fftfreq(m, d=1.0 / fs))
    lo, hi = band
    return (freqs >= lo) & (freqs <= hi)


def _periodogram_vjp(x: np.ndarray, fs: float, pad_factor: int,
                     grad_power: np.ndarray) -> np.ndarray:
    """Adjoint of `power_spectrum` w.r.t. the raw samples.

    ``grad_power`` is aligned with the one-sided DC-dropped power array
    (bins 1..m//2).  Returns d(loss)/d(samples).
    """
    n = x.size
    m = n * pad_factor
    centered = x - x.mean()
    spec = np.fft.fft(centered, m)
    half = m // 2
    w_full = np.zeros(m)
    w_full[1:half + 1] = grad_power / m
    if m % 2 == 0:
        w_full[half + 1:] = grad_power[-2::-1] / m
    else:
        w_full[half + 1:] = grad_power[::-1] / m
    g = w_full * np.conj(spec)
    dx = 2.0 * np.fft.fft(g).real[:n]
    return dx - dx.mean()


def pearson(y: PpgSignal, yhat: PpgSignal) -> float:
    """Pearson correlation of the two signals, in [-1, 1]."""
    value, _ = _pearson_core(y, yhat, want_grad=False)
    return value


def pearson_grad(y: PpgSignal, yhat: PpgSignal):
    """(value, d value / d yhat samples)."""
    return _pearson_core(y, yhat, want_grad=True)


def _pearson_core(y: PpgSignal, yhat: PpgSignal, want_grad: bool):
    _check_pair(y, yhat, same_fs=False)
    a = y.samples - y.samples.mean()
    b = yhat.samples - yhat.samples.mean()
    va = float(a @ a)
    vb = float(b @ b)
    if va <= 0.0 or vb <= 0.0:
        raise ValueError("zero variance")
    norm = np.sqrt(va * vb)
    r = float(a @ b) / norm
    if not want_grad:
        return r, None
    d = a / norm - r * b / vb
    return r, d - d.mean()


def mcc(y: PpgSignal, yhat: PpgSignal, circular: bool = False) -> float:
    """Maximum cross-correlation at the best temporal offset.

    Both signals are mean-subtracted; the cross-spectrum is band-passed to
    40-250 bpm; the correlation is normalized so that a perfect in-band
    match scores 1 and scaled by the prediction's in-band power ratio.

    By default the FFT inputs are zero-padded to twice their length, which
    makes the correlation linear in the offset.  ``circular=True`` skips the
    padding, giving the exactly shift-invariant circular variant used by the
    brute-force oracle tests.
    """
    value, _, _ = _mcc_core(y, yhat, circular, want_grad=False)
    return value


def mcc_grad(y: PpgSignal, yhat: PpgSignal, circular: bool = False):
    """(value, d value / d yhat samples); y is treated as fixed reference."""
    value, grad, _ = _mcc_core(y, yhat, circular, want_grad=True)
    return value, grad


def mcc_detail(y: PpgSignal, yhat: PpgSignal, circular: bool = False) -> LossValue:
    """MCC with its breakdown (peak correlation, in-band power ratio, lag)."""
    value, _, parts = _mcc_core(y, yhat, circular, want_grad=False)
    return LossValue(value=value, components=parts)


def _mcc_core(y: PpgSignal, yhat: PpgSignal, circular: bool, want_grad: bool):
    _check_pair(y, yhat)
    n = len(y)
    fs = y.fs
    a = y.samples - y.samples.mean()
    b = yhat.samples - yhat.samples.mean()
    va = float(a @ a)
    vb = float(b @ b)
    if va <= 0.0 or vb <= 0.0:
        raise ValueError("zero variance")
    sigma_a = np.sqrt(va / n)
    sigma_b = np.sqrt(vb / n)
    m = n if circular else 2 * n
    A = np.fft.fft(a, m)
    B = np.fft.fft(b, m)
    mask = _full_band_mask(m, fs)
    cross = np.fft.ifft(mask * A * np.conj(B)).real
    corr = cross / (n * sigma_a * sigma_b)
    k = int(np.argmax(corr))
    peak = float(corr[k])
    pb = np.abs(B) ** 2
    tot = float(pb.sum())
    inb = float((pb * mask).sum())
    c_pr = inb / tot if tot > 0.0 else 0.0
    value = c_pr * peak
    parts = {"peak_corr": peak, "in_band_ratio": c_pr, "lag": float(k if k <= m // 2 else k - m)}
    if not want_grad:
        return value, None, parts
    # peak = Re(sum_j u_j conj(B_j)) / (n sigma_a sigma_b)
    omega = np.exp(2j * np.pi * k * np.arange(m) / m)
    u = mask * A * omega / m
    d_num = np.fft.fft(np.conj(u)).real[:n]
    d_peak = d_num / (n * sigma_a * sigma_b) - peak * b / (n * sigma_b ** 2)
    w = (mask * tot - inb) / tot ** 2
    d_cpr = 2.0 * np.fft.fft(w * np.conj(B)).real[:n]
    d = d_cpr * peak + c_pr * d_peak
    return value, d - d.mean(), parts


def snr(yhat: PpgSignal, hr_gt_bpm: float, pad_factor: int = 1) -> float:
    """Signal-to-noise ratio in dB around the reference heart-rate bin.

    Power in the reference bin and its two neighbours over all remaining
    (DC-removed) power, capped at +-80 dB.
    """
    value, _ = _snr_core(yhat, hr_gt_bpm, pad_factor, want_grad=False)
    return value


def snr_grad(yhat: PpgSignal, hr_gt_bpm: float, pad_factor: int = 1):
    """(value, d value / d yhat samples); zero gradient in the capped regime."""
    return _snr_core(yhat, hr_gt_bpm, pad_factor, want_grad=True)


def _snr_core(yhat: PpgSignal, hr_gt_bpm: float, pad_factor: int, want_grad: bool):
    lo, hi = BPM_BAND
    f_gt = hr_gt_bpm / 60.0
    if not lo <= f_gt <= hi:
        raise ValueError(f"reference heart rate {hr_gt_bpm} bpm outside the 40-250 bpm band")
    power, freqs, _ = power_spectrum(yhat.samples, yhat.fs, pad_factor)
    if power.sum() <= 0.0:
        raise ValueError("zero variance")
    m = len(yhat) * pad_factor
    bin_hz = yhat.fs / m
    k0 = int(round(f_gt / bin_hz)) - 1  # index into the DC-dropped array
    sel = np.zeros(power.size, dtype=bool)
    for k in (k0 - 1, k0, k0 + 1):
        if 0 <= k < power.size:
            sel[k] = True
    num = float(power[sel].sum())
    den = float(power[~sel].sum())
    if den <= 0.0 or num <= 0.0:
        value = SNR_CAP_DB if den <= 0.0 else -SNR_CAP_DB
        return (value, np.zeros(len(yhat))) if want_grad else (value, None)
    raw = 10.0 * np.log10(num / den)
    value = float(np.clip(raw, -SNR_CAP_DB, SNR_CAP_DB))
    if not want_grad:
        return value, None
    if value != raw:
        return value, np.zeros(len(yhat))
    scale = 10.0 / np.log(10.0)
    grad_power = np.where(sel, scale / num, -scale / den)
    return value, _periodogram_vjp(yhat.samples, yhat.fs, pad_factor, grad_power)


def ipr(yhat: PpgSignal, pad_factor: int = 8) -> float:
    """Irrelevant power ratio: fraction of spectral power outside 40-250 bpm."""
    power, freqs, _ = power_spectrum(yhat.samples, yhat.fs, pad_factor)
    tot = float(power.sum())
    if tot <= 0.0:
        raise ValueError("zero total power")
    lo, hi = BPM_BAND
    inb = float(power[(freqs >= lo) & (freqs <= hi)].sum())
    return 1.0 - inb / tot


def psd_mse(a: PpgSignal, b: PpgSignal, pad_factor: int = LOSS_PAD_FACTOR) -> float:
    """MSE between the unit-sum band-masked power spectra of two signals."""
    value, _, _ = _psd_mse_core(a, b, pad_factor, want_grad=False)
    return value


def psd_mse_grad(a: PpgSignal, b: PpgSignal, pad_factor: int = LOSS_PAD_FACTOR):
    """(value, d/d a samples, d/d b samples)."""
    return _psd_mse_core(a, b, pad_factor, want_grad=True)


def _psd_mse_core(a: PpgSignal, b: PpgSignal, pad_factor: int, want_grad: bool):
    _check_pair(a, b)
    pa, freqs, _ = power_spectrum(a.samples, a.fs, pad_factor)
    pb, _, _ = power_spectrum(b.samples, b.fs, pad_factor)
    lo, hi = BPM_BAND
    band = (freqs >= lo) & (freqs <= hi)
    k = int(band.sum())
    if k == 0:
        raise ValueError("no bins inside the heart-rate band")
    sa = float(pa[band].sum())
    sb = float(pb[band].sum())
    if sa <= 0.0 or sb <= 0.0:
        raise ValueError("zero in-band power")
    qa = pa[band] / sa
    qb = pb[band] / sb
    diff = qa - qb
    value = float(diff @ diff) / k
    if not want_grad:
        return value, None, None

    def to_power_grad(d_q: np.ndarray, q: np.ndarray, total: float) -> np.ndarray:
        g = np.zeros(pa.size)
        g[band] = (d_q - float(d_q @ q)) / total
        return g

    d_qa = 2.0 * diff / k
    da = _periodogram_vjp(a.samples, a.fs, pad_factor, to_power_grad(d_qa, qa, sa))
    db = _periodogram_vjp(b.samples, b.fs, pad_factor, to_power_grad(-d_qa, qb, sb))
    return value, da, db


def _draw_views(rng: np.random.Generator, n: int, view_len: int, num_views: int,
                branches, pad_factor: int) -> list[int]:
    """View offsets shared across branches; one redraw per failing view."""
    offsets = []
    for _ in range(num_views):
        offset = int(rng.integers(0, n - view_len + 1))
        for attempt in range(2):
            ok = all(_has_in_band_power(sig, offset, view_len, pad_factor) for sig in branches)
            if ok:
                break
            if attempt == 1:
                raise ValueError("view with no in-band power after one redraw")
            offset = int(rng.integers(0, n - view_len + 1))
        offsets.append(offset)
    return offsets


def _has_in_band_power(sig: PpgSignal, offset: int, view_len: int, pad_factor: int) -> bool:
    view = sig.samples[offset:offset + view_len]
    if float(view.var()) <= 0.0:
        return False
    power, freqs, _ = power_spectrum(view, sig.fs, pad_factor)
    lo, hi = BPM_BAND
    return float(power[(freqs >= lo) & (freqs <= hi)].sum()) > 0.0


def mvtl(anchor: PpgSignal, positive: PpgSignal, negative: PpgSignal,
         cfg: MvtlConfig, rng: np.random.Generator) -> LossValue:
    """Multi-view triplet loss.

    Draws ``num_views`` contiguous subwindows (same offsets on every branch),
    sums psd_mse over all anchor x positive pairs (``p_tot``) and all
    anchor x negative pairs (``n_tot``), and returns
    ``(p_tot - n_tot) / num_views**2``.
    """
    value, _, parts = _mvtl_core(anchor, positive, negative, cfg, rng, want_grad=False)
    return LossValue(value=value, components=parts)


def mvtl_grad(anchor: PpgSignal, positive: PpgSignal, negative: PpgSignal,
              cfg: MvtlConfig, rng: np.random.Generator):
    """(LossValue, d/d anchor, d/d positive, d/d negative)."""
    value, grads, parts = _mvtl_core(anchor, positive, negative, cfg, rng, want_grad=True)
    return LossValue(value=value, components=parts), grads[0], grads[1], grads[2]


def _mvtl_core(anchor: PpgSignal, positive: PpgSignal, negative: PpgSignal,
               cfg: MvtlConfig, rng: np.random.Generator, want_grad: bool):
    _check_pair(anchor, positive)
    _check_pair(anchor, negative)
    n = len(anchor)
    fs = anchor.fs
    view_len = int(round(cfg.view_len_s * fs))
    if view_len < 2:
        raise ValueError("view shorter than 2 samples")
    if view_len > n:
        raise ValueError(f"view length {view_len} exceeds signal length {n}")
    offsets = _draw_views(rng, n, view_len, cfg.num_views,
                          (anchor, positive, negative), cfg.pad_factor)

    def view(sig: PpgSignal, off: int) -> PpgSignal:
        return PpgSignal(sig.samples[off:off + view_len], fs)

    v2 = cfg.num_views ** 2
    p_tot = 0.0
    n_tot = 0.0
    da = np.zeros(n)
    dp = np.zeros(n)
    dn = np.zeros(n)
    for oa in offsets:
        for ob in offsets:
            if want_grad:
                d_pos, ga, gp = psd_mse_grad(view(anchor, oa), view(positive, ob), cfg.pad_factor)
                d_neg, ga2, gn = psd_mse_grad(view(anchor, oa), view(negative, ob), cfg.pad_factor)
                da[oa:oa + view_len] += (ga - ga2) / v2
                dp[ob:ob + view_len] += gp / v2
                dn[ob:ob + view_len] -= gn / v2
            else:
                d_pos = psd_mse(view(anchor, oa), view(positive, ob), cfg.pad_factor)
                d_neg = psd_mse(view(anchor, oa), view(negative, ob), cfg.pad_factor)
            p_tot += d_pos
            n_tot += d_neg
    value = (p_tot - n_tot) / v2
    parts = {"p_tot": p_tot, "n_tot": n_tot}
    grads = (da, dp, dn) if want_grad else None
    return value, grads, parts
