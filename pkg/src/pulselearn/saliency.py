"""Saliency sampling: per-frame maps, sparsity/temporal regularizers, and a
differentiable spatial warp.

The saliency network is a small trainable conv stack whose final
softmax-normalized output gives one nonnegative map per frame (summing to
one over positions).  The warp treats the Gaussian-smoothed map as an
attraction field: each output pixel samples the input at the map-weighted
local centroid, so salient regions are magnified.  Both the warp and the
regularizers are differentiable, and gradients flow back through the
softmax into the network.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Conv3d, Elu, Graph, SoftmaxSpatial, save_params
from .video import VideoClip

# Attraction-field smoothing: Gaussian std as a fraction of the map width.
WARP_SIGMA_FRACTION = 0.25


@dataclass(frozen=True)
class SaliencyMap:
    """Per-frame nonnegative maps over a coarse (h, w) grid, each summing to 1."""

    values: np.ndarray  # (D, h, w)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"saliency maps must be (D, h, w), got {values.shape}")
        if np.any(values < 0):
            raise ValueError("saliency maps must be nonnegative")
        sums = values.sum(axis=(1, 2))
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("each frame's saliency map must sum to 1")
        object.__setattr__(self, "values", values)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_positions(self) -> int:
        return self.values.shape[1] * self.values.shape[2]

    def frame_entropy(self) -> np.ndarray:
        v = self.values.reshape(self.num_frames, -1)
        terms = np.where(v > 0, v * np.log(v), 0.0)
        return -terms.sum(axis=1)


def build_saliency_net(in_channels: int, width: int = 8,
                       rng: np.random.Generator | None = None) -> Graph:
    """Two stride-2 conv layers with an ELU between, softmax-normalized.

    Frame size H maps to an H/4 x W/4 saliency grid (e.g. 64 -> 16).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    return Graph([
        Conv3d(in_channels, width, kernel=(1, 3, 3), stride=(1, 2, 2), pad=(0, 1, 1)),
        Elu(),
        Conv3d(width, 1, kernel=(1, 3, 3), stride=(1, 2, 2), pad=(0, 1, 1)),
        SoftmaxSpatial(),
    ], rng=rng)


def compute_map(net: Graph, clip: VideoClip) -> SaliencyMap:
    """Forward the saliency net over a clip; one normalized map per frame."""
    from .models import clip_to_input
    out, _ = net.forward_tape(clip_to_input(clip))
    if out.shape[1] != 1:
        raise ValueError("saliency net must emit a single channel")
    return SaliencyMap(out[:, 0])


def sparsity_loss(smap: SaliencyMap) -> float:
    """Mean map entropy scaled by 1/N; lower for spatially concentrated maps."""
    value, _ = _sparsity_core(smap, want_grad=False)
    return value


def sparsity_loss_grad(smap: SaliencyMap):
    return _sparsity_core(smap, want_grad=True)


def _sparsity_core(smap: SaliencyMap, want_grad: bool):
    v = smap.values
    d = smap.num_frames
    n = smap.num_positions
    terms = np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)
    value = float(-terms.sum() / (n * d))
    if not want_grad:
        return value, None
    grad = np.where(v > 0, -(np.log(np.where(v > 0, v, 1.0)) + 1.0) / (n * d), 0.0)
    return value, grad


def temporal_loss(smap: SaliencyMap) -> float:
    """Mean squared frame-to-frame map difference; zero for static maps."""
    value, _ = _temporal_core(smap, want_grad=False)
    return value


def temporal_loss_grad(smap: SaliencyMap):
    return _temporal_core(smap, want_grad=True)


def _temporal_core(smap: SaliencyMap, want_grad: bool):
    v = smap.values
    d = smap.num_frames
    n = smap.num_positions
    if d < 2:
        raise ValueError("temporal loss needs at least 2 frames")
    diff = v[1:] - v[:-1]
    scale = 1.0 / (n * (d - 1))
    value = float((diff ** 2).sum() * scale)
    if not want_grad:
        return value, None
    grad = np.zeros_like(v)
    grad[1:] += 2.0 * diff * scale
    grad[:-1] -= 2.0 * diff * scale
    return value, grad


def saliency_loss(smap: SaliencyMap, w_sparsity: float = 1.0, w_temporal: float = 1.0) -> float:
    """Weighted sum of the two regularizers."""
    return w_sparsity * sparsity_loss(smap) + w_temporal * temporal_loss(smap)


def _gauss_kernel_1d(n_out: int, pad: int, sigma: float) -> np.ndarray:
    # rows: output positions 0..n_out-1; cols: padded source positions -pad..
    # truncated at the pad radius so every window is complete and symmetric
    # (a uniform map then warps to an exact identity)
    out_pos = np.arange(n_out)[:, None]
    src_pos = np.arange(-pad, n_out + pad)[None, :]
    delta = out_pos - src_pos
    kernel = np.exp(-(delta ** 2) / (2.0 * sigma * sigma))
    kernel[np.abs(delta) > pad] = 0.0
    return kernel


def _upsample_grid(n_in: int, n_out: int):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(pos).astype(np.intp), max(n_in - 2, 0))
    return i0, pos - i0


class _WarpPlan:
    """Precomputed geometry for warping (and its adjoint) at one size combo."""

    def __init__(self, map_hw: tuple[int, int], frame_hw: tuple[int, int], sigma: float):
        self.h, self.w = map_hw
        self.H, self.W = frame_hw
        if self.H % self.h or self.W % self.w:
            raise ValueError(
                f"map grid {map_hw} must divide the frame size {frame_hw}")
        self.sigma = sigma
        self.pad = int(np.ceil(3.0 * sigma))
        self.ky = _gauss_kernel_1d(self.h, self.pad, sigma)
        self.kx = _gauss_kernel_1d(self.w, self.pad, sigma)
        self.src_y = np.arange(-self.pad, self.h + self.pad, dtype=np.float64)
        self.src_x = np.arange(-self.pad, self.w + self.pad, dtype=np.float64)
        self.scale_y = self.H / self.h
        self.scale_x = self.W / self.w
        self.iy, self.fy = _upsample_grid(self.h, self.H)
        self.ix, self.fx = _upsample_grid(self.w, self.W)

    def pad_maps(self, maps: np.ndarray) -> np.ndarray:
        return np.pad(maps, ((0, 0), (self.pad, self.pad), (self.pad, self.pad)), mode="edge")

    def pad_adjoint(self, grad_padded: np.ndarray) -> np.ndarray:
        d = grad_padded.shape[0]
        out = np.zeros((d, self.h, self.w))
        ys = np.clip(np.arange(-self.pad, self.h + self.pad), 0, self.h - 1)
        xs = np.clip(np.arange(-self.pad, self.w + self.pad), 0, self.w - 1)
        np.add.at(out, (slice(None), ys[:, None], xs[None, :]), grad_padded)
        return out

    def grids(self, maps: np.ndarray):
        """Map-grid source coordinates: centroid of the kernel-weighted map."""
        padded = self.pad_maps(maps)
        den = np.einsum("ua,dab,vb->duv", self.ky, padded, self.kx)
        if np.any(den <= 1e-12):
            raise ValueError("degenerate attraction-field denominator")
        num_y = np.einsum("ua,dab,vb->duv", self.ky, padded * self.src_y[:, None], self.kx)
        num_x = np.einsum("ua,dab,vb->duv", self.ky, padded * self.src_x[None, :], self.kx)
        return num_y / den, num_x / den, (padded, den, num_y, num_x)

    def upsample(self, field: np.ndarray) -> np.ndarray:
        """Bilinear (D, h, w) -> (D, H, W) with edge clamping."""
        fy = self.fy[None, :, None]
        fx = self.fx[None, None, :]
        iy, ix = self.iy, self.ix
        iy1 = np.minimum(iy + 1, self.h - 1)
        ix1 = np.minimum(ix + 1, self.w - 1)
        top = field[:, iy][:, :, ix] * (1 - fx) + field[:, iy][:, :, ix1] * fx
        bot = field[:, iy1][:, :, ix] * (1 - fx) + field[:, iy1][:, :, ix1] * fx
        return top * (1 - fy) + bot * fy

    def upsample_adjoint(self, grad: np.ndarray) -> np.ndarray:
        d = grad.shape[0]
        out = np.zeros((d, self.h, self.w))
        fy = self.fy[None, :, None]
        fx = self.fx[None, None, :]
        iy = np.broadcast_to(self.iy[None, :, None], grad.shape)
        iy1 = np.minimum(iy + 1, self.h - 1)
        ix = np.broadcast_to(self.ix[None, None, :], grad.shape)
        ix1 = np.minimum(ix + 1, self.w - 1)
        frame = np.broadcast_to(np.arange(d)[:, None, None], grad.shape)
        np.add.at(out, (frame, iy, ix), grad * (1 - fy) * (1 - fx))
        np.add.at(out, (frame, iy, ix1), grad * (1 - fy) * fx)
        np.add.at(out, (frame, iy1, ix), grad * fy * (1 - fx))
        np.add.at(out, (frame, iy1, ix1), grad * fy * fx)
        return out


def warp_grid(smap: SaliencyMap, sigma: float | None = None):
    """Source coordinates on the map grid; the direct computation used by
    oracles and diagnostics.  Returns (src_y, src_x) arrays of shape (D,h,w)."""
    h, w = smap.values.shape[1:]
    sigma = sigma if sigma is not None else WARP_SIGMA_FRACTION * w
    plan = _WarpPlan((h, w), (h, w), sigma)
    src_y, src_x, _ = plan.grids(smap.values)
    return src_y, src_x


def warp(clip: VideoClip, smap: SaliencyMap, sigma: float | None = None) -> VideoClip:
    out, _ = warp_with_vjp(clip, smap, sigma)
    return out


def warp_with_vjp(clip: VideoClip, smap: SaliencyMap, sigma: float | None = None):
    """Warp a clip toward its salient regions.

    Returns (warped clip, vjp) with ``vjp(grad_frames) -> (d clip frames,
    d map values)``.  The map grid must divide the frame size; coordinates
    are computed on the map grid as Gaussian-attraction centroids, converted
    to displacements, bilinearly upsampled, and applied with a clamped
    bilinear read (so pixel values stay inside the input range).
    """
    frames = clip.to_float()
    t, H, W, c = frames.shape
    maps = smap.values
    if maps.shape[0] != t:
        raise ValueError(f"map frames {maps.shape[0]} != clip frames {t}")
    h, w = maps.shape[1:]
    sigma = sigma if sigma is not None else WARP_SIGMA_FRACTION * w
    plan = _WarpPlan((h, w), (H, W), sigma)

    src_y, src_x, geo = plan.grids(maps)
    base_y = np.arange(h, dtype=np.float64)[None, :, None]
    base_x = np.arange(w, dtype=np.float64)[None, None, :]
    disp_y = plan.upsample(src_y - base_y) * plan.scale_y
    disp_x = plan.upsample(src_x - base_x) * plan.scale_x

    out_y = np.arange(H, dtype=np.float64)[None, :, None]
    out_x = np.arange(W, dtype=np.float64)[None, None, :]
    coord_y = out_y + disp_y
    coord_x = out_x + disp_x
    clamped_y = np.clip(coord_y, 0.0, H - 1.0)
    clamped_x = np.clip(coord_x, 0.0, W - 1.0)
    y_active = (coord_y > 0.0) & (coord_y < H - 1.0)
    x_active = (coord_x > 0.0) & (coord_x < W - 1.0)
    iy = np.minimum(clamped_y.astype(np.intp), H - 2) if H > 1 else np.zeros_like(clamped_y, dtype=np.intp)
    ix = np.minimum(clamped_x.astype(np.intp), W - 2) if W > 1 else np.zeros_like(clamped_x, dtype=np.intp)
    fy = (clamped_y - iy)[..., None]
    fx = (clamped_x - ix)[..., None]

    frame_idx = np.broadcast_to(np.arange(t)[:, None, None], iy.shape)
    v00 = frames[frame_idx, iy, ix]
    v01 = frames[frame_idx, iy, ix + 1]
    v10 = frames[frame_idx, iy + 1, ix]
    v11 = frames[frame_idx, iy + 1, ix + 1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    warped = top * (1 - fy) + bot * fy

    def vjp(grad_frames: np.ndarray):
        g = np.asarray(grad_frames, dtype=np.float64)
        # clip gradient: scatter the four bilinear weights
        d_frames = np.zeros_like(frames)
        np.add.at(d_frames, (frame_idx, iy, ix), g * (1 - fy) * (1 - fx))
        np.add.at(d_frames, (frame_idx, iy, ix + 1), g * (1 - fy) * fx)
        np.add.at(d_frames, (frame_idx, iy + 1, ix), g * fy * (1 - fx))
        np.add.at(d_frames, (frame_idx, iy + 1, ix + 1), g * fy * fx)
        # coordinate gradients (zero where the clamp is active)
        d_fy = ((bot - top) * g).sum(axis=-1)
        d_fx = (((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * g).sum(axis=-1)
        d_coord_y = np.where(y_active, d_fy, 0.0)
        d_coord_x = np.where(x_active, d_fx, 0.0)
        d_srcy = plan.upsample_adjoint(d_coord_y * plan.scale_y)
        d_srcx = plan.upsample_adjoint(d_coord_x * plan.scale_x)
        # centroid quotient rule back to the padded map
        padded, den, num_y, num_x = geo
        gy_num = d_srcy / den
        gx_num = d_srcx / den
        g_den = -(d_srcy * num_y + d_srcx * num_x) / (den * den)
        d_padded = (np.einsum("ua,duv,vb->dab", plan.ky, gy_num, plan.kx) * plan.src_y[:, None]
                    + np.einsum("ua,duv,vb->dab", plan.ky, gx_num, plan.kx) * plan.src_x[None, :]
                    + np.einsum("ua,duv,vb->dab", plan.ky, g_den, plan.kx))
        d_maps = plan.pad_adjoint(d_padded)
        return d_frames, d_maps

    return VideoClip(warped, clip.fps), vjp


def dump_maps(path, maps_by_clip: dict[str, SaliencyMap]) -> None:
    """Write one PLCK tensor file per clip plus a CSV entropy index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["clip_id", "frame", "entropy"])
        for clip_id, smap in maps_by_clip.items():
            save_params(path / f"{clip_id}.plck", {"saliency": smap.values})
            for frame, entropy in enumerate(smap.frame_entropy()):
                writer.writerow([clip_id, frame, f"{entropy:.9g}"])
