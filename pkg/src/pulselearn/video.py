"""Video clip container and spatial bilinear resizing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VideoClip:
    """A (T, H, W, C) stack of frames with a frame rate in frames/s.

    Pixels are either uint8 or float64; synthetic data uses floats in
    roughly [0, 1].
    """

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4:
            raise ValueError(f"frames must be (T, H, W, C), got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("clip needs at least one frame")
        if frames.dtype != np.uint8:
            frames = np.ascontiguousarray(frames, dtype=np.float64)
            if not np.all(np.isfinite(frames)):
                raise ValueError("frames contain non-finite values")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.frames.shape[0] / self.fps

    def slice_frames(self, start: int, stop: int) -> "VideoClip":
        return VideoClip(self.frames[start:stop].copy(), self.fps)

    def to_float(self) -> np.ndarray:
        """Frames as float64; uint8 pixels are scaled to [0, 1]."""
        if self.frames.dtype == np.uint8:
            return self.frames.astype(np.float64) / 255.0
        return self.frames


def _axis_grid(n_in: int, n_out: int):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(pos).astype(np.intp), max(n_in - 2, 0))
    frac = pos - i0
    return i0, frac


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) image; samples at pixel centers."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    iy, fy = _axis_grid(h, out_h)
    ix, fx = _axis_grid(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    iy1 = np.minimum(iy + 1, h - 1)
    ix1 = np.minimum(ix + 1, w - 1)
    top = img[np.ix_(iy, ix)] * (1 - fx) + img[np.ix_(iy, ix1)] * fx
    bot = img[np.ix_(iy1, ix)] * (1 - fx) + img[np.ix_(iy1, ix1)] * fx
    return top * (1 - fy) + bot * fy
