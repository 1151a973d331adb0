"""Temporal frequency resampling of pulse signals and video clips.

Resampling by a ratio ``r`` maps output index ``j`` to source position
``j / r`` (clamped to the ends), so a ratio below one shortens the series
and multiplies every frequency by ``1 / r``.  The sampling rate metadata is
unchanged.  The operation is linear; adjoint (``*_with_vjp``) variants are
provided because gradients flow through the resampler during contrastive
training.
"""

from __future__ import annotations

import numpy as np

from .spectral import PpgSignal
from .video import VideoClip

# Contrastive ratio prior: speeds the pulse up by a factor of 1.25 to 1.5.
RATIO_LO = 0.66
RATIO_HI = 0.80


def draw_ratio(rng: np.random.Generator, lo: float = RATIO_LO, hi: float = RATIO_HI) -> float:
    """Uniform resampling ratio in [lo, hi]."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    return float(rng.uniform(lo, hi))


def _grid(n_in: int, n_out: int, r: float):
    pos = np.arange(n_out) / r
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    frac = pos - i0
    return i0, frac


def _out_length(n_in: int, r: float) -> int:
    if r <= 0:
        raise ValueError(f"resampling ratio must be positive, got {r}")
    n_out = int(round(n_in * r))
    if n_out < 2:
        raise ValueError(f"resampled length {n_out} below 2")
    return n_out


def resample_signal(sig: PpgSignal, r: float) -> PpgSignal:
    """Linear-interpolation resampling of a 1-D signal by ratio ``r``."""
    out, _ = resample_signal_with_vjp(sig, r)
    return out


def resample_signal_with_vjp(sig: PpgSignal, r: float):
    """Resample and return (output, vjp) where vjp maps output-sample
    gradients back to input-sample gradients."""
    n = len(sig)
    n_out = _out_length(n, r)
    i0, frac = _grid(n, n_out, r)
    out = sig.samples[i0] * (1.0 - frac) + sig.samples[i0 + 1] * frac

    def vjp(grad: np.ndarray) -> np.ndarray:
        dx = np.zeros(n)
        np.add.at(dx, i0, grad * (1.0 - frac))
        np.add.at(dx, i0 + 1, grad * frac)
        return dx

    return PpgSignal(out, sig.fs), vjp


def resample_frames(frames: np.ndarray, r: float) -> np.ndarray:
    """Resample a (T, ...) frame stack along T only.

    Spatial axes are untouched, so this is the trilinear case of a video
    whose spatial grid is unchanged.  ``r == 1`` returns a bit-identical
    copy (original dtype preserved); otherwise the result is float64.
    """
    out, _ = resample_frames_with_vjp(frames, r)
    return out


def resample_frames_with_vjp(frames: np.ndarray, r: float):
    n = frames.shape[0]
    if r == 1.0:
        def vjp_identity(grad: np.ndarray) -> np.ndarray:
            return np.asarray(grad, dtype=np.float64)
        return frames.copy(), vjp_identity
    n_out = _out_length(n, r)
    return resample_frames_to_length_with_vjp(frames, n_out, r)


def resample_frames_to_length(frames: np.ndarray, n_out: int) -> np.ndarray:
    """Stretch or squeeze a frame stack to exactly ``n_out`` frames."""
    out, _ = resample_frames_to_length_with_vjp(frames, n_out, n_out / frames.shape[0])
    return out


def resample_frames_to_length_with_vjp(frames: np.ndarray, n_out: int, r: float):
    n = frames.shape[0]
    if n_out < 2:
        raise ValueError(f"resampled length {n_out} below 2")
    i0, frac = _grid(n, n_out, r)
    f = frac.reshape((-1,) + (1,) * (frames.ndim - 1))
    src = np.asarray(frames, dtype=np.float64)
    out = src[i0] * (1.0 - f) + src[i0 + 1] * f

    def vjp(grad: np.ndarray) -> np.ndarray:
        dx = np.zeros(src.shape)
        np.add.at(dx, i0, grad * (1.0 - f))
        np.add.at(dx, i0 + 1, grad * f)
        return dx

    return out, vjp


def resample_video(clip: VideoClip, r: float) -> VideoClip:
    """Resample a clip along time by ratio ``r``; H, W, C are unchanged."""
    return VideoClip(resample_frames(clip.frames, r), clip.fps)


def resample_signal_to_length(sig: PpgSignal, n_out: int) -> PpgSignal:
    """Stretch or squeeze a signal to exactly ``n_out`` samples."""
    if n_out < 2:
        raise ValueError(f"resampled length {n_out} below 2")
    i0, frac = _grid(len(sig), n_out, n_out / len(sig))
    out = sig.samples[i0] * (1.0 - frac) + sig.samples[i0 + 1] * frac
    return PpgSignal(out, sig.fs)
