"""Synthetic pulse-video generation, recording containers and on-disk format,
sticky-box preprocessing, and training-clip sampling.

On-disk layout (one directory per recording):

* ``video.rpv``  - raw binary frames: magic ``RPV1``, u32 LE T, H, W, C,
  u8 dtype flag (0 = uint8, 1 = float64), then frames row-major.
* ``ppg.csv``    - header ``frame,ppg,hr``; empty fields for absent series.
* ``boxes.csv``  - optional, header ``frame,x,y,w,h``.
* ``meta.txt``   - key=value lines (fps, subject).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import ipr
from .resample import resample_frames_to_length, resample_signal_to_length
from .spectral import PpgSignal
from .video import VideoClip, bilinear_resize

RECORDING_MAGIC = b"RPV1"
IPR_REDRAW_THRESHOLD = 0.60
MAX_REDRAWS = 10
STICKY_SCALE = 1.5


class Recording:
    """A video plus optional ground truth.

    Accessing ``ppg`` or ``hr`` increments ``label_reads``, which audits the
    label-free contract of contrastive training.  Loading and saving use the
    private fields and do not count.
    """

    def __init__(self, video: VideoClip, ppg: PpgSignal | None = None,
                 hr: np.ndarray | None = None, boxes: np.ndarray | None = None,
                 subject: str = ""):
        t = video.num_frames
        if ppg is not None and len(ppg) != t:
            raise ValueError("ppg must have one sample per video frame")
        if hr is not None:
            hr = np.ascontiguousarray(hr, dtype=np.float64)
            if hr.shape != (t,):
                raise ValueError("hr must have one value per video frame")
        if boxes is not None:
            boxes = np.ascontiguousarray(boxes, dtype=np.float64)
            if boxes.shape != (t, 4):
                raise ValueError("boxes must be (T, 4) x,y,w,h")
        self.video = video
        self._ppg = ppg
        self._hr = hr
        self.boxes = boxes
        self.subject = subject
        self.label_reads = 0

    @property
    def has_labels(self) -> bool:
        return self._ppg is not None or self._hr is not None

    @property
    def ppg(self) -> PpgSignal | None:
        self.label_reads += 1
        return self._ppg

    @property
    def hr(self) -> np.ndarray | None:
        self.label_reads += 1
        return self._hr

    @property
    def num_frames(self) -> int:
        return self.video.num_frames

    @property
    def fps(self) -> float:
        return self.video.fps


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic recording description: a flat gray canvas with a pulsing
    rectangle, optional flashing nuisance block, and Gaussian pixel noise."""

    duration_s: float = 60.0
    fps: float = 30.0
    height: int = 32
    width: int = 32
    channels: int = 1
    region: tuple[int, int, int, int] = (12, 12, 8, 8)  # y, x, h, w
    base_hr: float = 90.0
    drift_bpm_s: float = 0.2
    amplitude: float = 0.05
    noise_std: float = 0.05
    base_gray: float = 0.5
    nuisance_region: tuple[int, int, int, int] | None = None
    nuisance_hr_range: tuple[float, float] = (60.0, 180.0)
    nuisance_amplitude: float | None = None

    def __post_init__(self):
        if not 40.0 <= self.base_hr <= 250.0:
            raise ValueError("base_hr must lie in the 40-250 bpm band")
        if self.duration_s <= 0 or self.fps <= 0:
            raise ValueError("duration and fps must be positive")
        _check_region(self.region, self.height, self.width, "region")
        if self.nuisance_region is not None:
            _check_region(self.nuisance_region, self.height, self.width, "nuisance_region")
            if _regions_overlap(self.region, self.nuisance_region):
                raise ValueError("pulse and nuisance regions overlap")


def _check_region(region, height, width, name):
    y, x, h, w = region
    if h < 1 or w < 1 or y < 0 or x < 0 or y + h > height or x + w > width:
        raise ValueError(f"{name} {region} outside the {height}x{width} frame")


def _regions_overlap(a, b) -> bool:
    ay, ax, ah, aw = a
    by, bx, bh, bw = b
    return not (ay + ah <= by or by + bh <= ay or ax + aw <= bx or bx + bw <= ax)


def synth_generate(spec: SynthSpec, rng: np.random.Generator) -> Recording:
    """Generate a recording with a known embedded pulse.

    The ground-truth pulse is a unit sinusoid whose instantaneous rate
    performs a bounded random walk (increments within +-drift/frame), so the
    rate change over any window of d seconds is at most drift*d bpm.
    """
    n = int(round(spec.duration_s * spec.fps))
    step = spec.drift_bpm_s / spec.fps
    increments = rng.uniform(-step, step, size=n)
    hr = np.clip(spec.base_hr + np.cumsum(increments) - increments[0], 40.0, 250.0)
    phase = 2.0 * np.pi * np.cumsum(hr / 60.0) / spec.fps + rng.uniform(0.0, 2.0 * np.pi)
    pulse = np.sin(phase)

    frames = spec.base_gray + spec.noise_std * rng.standard_normal(
        (n, spec.height, spec.width, spec.channels))
    y, x, h, w = spec.region
    frames[:, y:y + h, x:x + w, :] += spec.amplitude * pulse[:, None, None, None]

    if spec.nuisance_region is not None:
        lo, hi = spec.nuisance_hr_range
        nuisance_hz = rng.uniform(lo, hi) / 60.0
        amp = spec.nuisance_amplitude if spec.nuisance_amplitude is not None else spec.amplitude
        t = np.arange(n) / spec.fps
        flash = amp * np.sin(2.0 * np.pi * nuisance_hz * t + rng.uniform(0.0, 2.0 * np.pi))
        ny, nx, nh, nw = spec.nuisance_region
        frames[:, ny:ny + nh, nx:nx + nw, :] += flash[:, None, None, None]

    return Recording(video=VideoClip(frames, spec.fps),
                     ppg=PpgSignal(pulse, spec.fps), hr=hr)


def buffered_boxes(boxes: np.ndarray, scale: float = STICKY_SCALE) -> np.ndarray:
    """Sticky buffered boxes: scaled up, re-centered only when the raw box
    escapes the current buffer."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    current = _scaled_box(boxes[0], scale)
    for i, box in enumerate(boxes):
        if not _box_inside(box, current):
            current = _scaled_box(box, scale)
        out[i] = current
    return out


def _scaled_box(box, scale):
    x, y, w, h = box
    cx, cy = x + w / 2.0, y + h / 2.0
    return np.array([cx - w * scale / 2.0, cy - h * scale / 2.0, w * scale, h * scale])


def _box_inside(inner, outer) -> bool:
    ix, iy, iw, ih = inner
    ox, oy, ow, oh = outer
    return ix >= ox and iy >= oy and ix + iw <= ox + ow and iy + ih <= oy + oh


def sticky_crop(clip: VideoClip, boxes: np.ndarray, out_size: int = 64) -> VideoClip:
    """Crop each frame to its buffered box (clamped to the frame) and
    bilinear-resize to out_size x out_size."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape != (clip.num_frames, 4):
        raise ValueError("need one x,y,w,h box per frame")
    frames = clip.to_float()
    t, height, width, c = frames.shape
    buffered = buffered_boxes(boxes)
    out = np.empty((t, out_size, out_size, c))
    for i in range(t):
        x, y, w, h = buffered[i]
        x0 = int(np.clip(np.floor(x), 0, width - 1))
        y0 = int(np.clip(np.floor(y), 0, height - 1))
        x1 = int(np.clip(np.ceil(x + w), x0 + 1, width))
        y1 = int(np.clip(np.ceil(y + h), y0 + 1, height))
        out[i] = bilinear_resize(frames[i, y0:y1, x0:x1], out_size, out_size)
    return VideoClip(out, clip.fps)


@dataclass
class SampledClip:
    """A training window: video, optional stretched ground truth, provenance."""

    video: VideoClip
    ppg: PpgSignal | None
    hr: np.ndarray | None
    start: int
    src_len: int
    stretch: float  # multiplies the ground-truth heart rate (<= 1)


def stretch_window(rec: Recording, start: int, src_len: int, out_len: int,
                   with_labels: bool, gt_start: int | None = None) -> SampledClip:
    """Cut frames [start, start+src_len) and stretch them to out_len frames;
    ground truth is stretched the same way and its rate scaled by
    src_len/out_len."""
    frames = rec.video.frames[start:start + src_len]
    if src_len != out_len:
        frames = resample_frames_to_length(frames, out_len)
        stretch = src_len / out_len
    else:
        frames = frames.copy()
        stretch = 1.0
    video = VideoClip(frames, rec.fps)
    ppg = hr = None
    if with_labels:
        g0 = start if gt_start is None else gt_start
        source_ppg = rec.ppg
        if source_ppg is not None:
            window = PpgSignal(source_ppg.samples[g0:g0 + src_len], rec.fps)
            ppg = window if src_len == out_len else resample_signal_to_length(window, out_len)
        source_hr = rec.hr
        if source_hr is not None:
            hr_win = PpgSignal(source_hr[g0:g0 + src_len], rec.fps)
            hr_win = hr_win if src_len == out_len else resample_signal_to_length(hr_win, out_len)
            hr = hr_win.samples * stretch
    return SampledClip(video=video, ppg=ppg, hr=hr, start=start,
                       src_len=src_len, stretch=stretch)


def sample_clip(rec: Recording, window_s: float, rng: np.random.Generator,
                augment: bool = False, with_labels: bool = True,
                gt_offset_s: float = 0.0, max_redraws: int = MAX_REDRAWS) -> SampledClip:
    """Draw one training window of ``window_s`` seconds.

    With ``augment`` a shorter sub-window may be stretched to the full
    length (always when the recording is shorter than the window, with
    probability 0.5 otherwise), slowing the pulse by at most a third.  When
    ground truth is read and its irrelevant power ratio exceeds 0.6 the
    window is redrawn, up to ``max_redraws`` attempts.

    ``gt_offset_s`` shifts where the ground truth is read relative to the
    video (used by the desynchronization benchmark); the shifted window is
    clamped to the recording, never wrapped.
    """
    n = rec.num_frames
    out_len = int(round(window_s * rec.fps))
    min_src = int(np.ceil(out_len * 2.0 / 3.0))
    if n < (min_src if augment else out_len):
        raise ValueError(f"recording too short: {n} frames for a {out_len}-frame window")
    for _ in range(max_redraws):
        if augment and n < out_len:
            src_len = int(rng.integers(min_src, min(n, out_len) + 1))
        elif augment and rng.random() < 0.5:
            src_len = int(rng.integers(min_src, out_len + 1))
        else:
            src_len = out_len
        start = int(rng.integers(0, n - src_len + 1))
        gt_start = start
        if gt_offset_s:
            gt_start = int(np.clip(start + round(gt_offset_s * rec.fps), 0, n - src_len))
        sample = stretch_window(rec, start, src_len, out_len, with_labels, gt_start)
        if sample.ppg is None:
            return sample
        try:
            quality = ipr(sample.ppg)
        except ValueError:
            continue
        if quality <= IPR_REDRAW_THRESHOLD:
            return sample
    raise ValueError(f"no clean window after {max_redraws} redraws")


def iter_eval_windows(rec: Recording, window_s: float, stride_s: float | None = None,
                      multiple: int = 1):
    """Deterministic non-overlapping (or strided) evaluation windows.

    Yields (start_frame, VideoClip).  Window lengths are rounded down to the
    requested multiple (model length constraints).
    """
    out_len = int(round(window_s * rec.fps))
    out_len -= out_len % max(multiple, 1)
    if out_len < 2:
        raise ValueError("evaluation window too short")
    stride = int(round((stride_s if stride_s is not None else window_s) * rec.fps))
    start = 0
    while start + out_len <= rec.num_frames:
        yield start, rec.video.slice_frames(start, start + out_len)
        start += stride


# ---------------------------------------------------------------------------
# On-disk container
# ---------------------------------------------------------------------------

def save_recording(path, rec: Recording) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = rec.video.frames
    dtype_flag = 0 if frames.dtype == np.uint8 else 1
    with open(path / "video.rpv", "wb") as f:
        f.write(RECORDING_MAGIC)
        t, h, w, c = frames.shape
        f.write(struct.pack("<4I", t, h, w, c))
        f.write(struct.pack("<B", dtype_flag))
        f.write(frames.astype("<u1" if dtype_flag == 0 else "<f8").tobytes())
    (path / "meta.txt").write_text(f"fps={rec.fps!r}\nsubject={rec.subject}\n")
    if rec._ppg is not None or rec._hr is not None:
        with open(path / "ppg.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "ppg", "hr"])
            for i in range(rec.num_frames):
                ppg_val = repr(float(rec._ppg.samples[i])) if rec._ppg is not None else ""
                hr_val = repr(float(rec._hr[i])) if rec._hr is not None else ""
                writer.writerow([i, ppg_val, hr_val])
    if rec.boxes is not None:
        with open(path / "boxes.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "x", "y", "w", "h"])
            for i, (x, y, w, h) in enumerate(rec.boxes):
                writer.writerow([i] + [repr(float(v)) for v in (x, y, w, h)])


def load_recording(path) -> Recording:
    path = Path(path)
    blob = (path / "video.rpv").read_bytes()
    if blob[:4] != RECORDING_MAGIC:
        raise ValueError(f"bad video magic {blob[:4]!r}, expected {RECORDING_MAGIC!r}")
    t, h, w, c = struct.unpack("<4I", blob[4:20])
    (dtype_flag,) = struct.unpack("<B", blob[20:21])
    dtype = "<u1" if dtype_flag == 0 else "<f8"
    count = t * h * w * c
    expected = 21 + count * np.dtype(dtype).itemsize
    if len(blob) < expected:
        raise ValueError(f"truncated video.rpv: {len(blob)} bytes, expected {expected}")
    frames = np.frombuffer(blob[21:expected], dtype=dtype).reshape(t, h, w, c)
    frames = frames.astype(np.uint8 if dtype_flag == 0 else np.float64)

    fps = None
    subject = ""
    for line in (path / "meta.txt").read_text().splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        if key == "fps":
            fps = float(value)
        elif key == "subject":
            subject = value
    if fps is None:
        raise ValueError("meta.txt missing fps")

    ppg = hr = None
    if (path / "ppg.csv").exists():
        with open(path / "ppg.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        if rows and rows[0].get("ppg"):
            ppg = PpgSignal(np.array([float(r["ppg"]) for r in rows]), fps)
        if rows and rows[0].get("hr"):
            hr = np.array([float(r["hr"]) for r in rows])

    boxes = None
    if (path / "boxes.csv").exists():
        with open(path / "boxes.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        boxes = np.array([[float(r["x"]), float(r["y"]), float(r["w"]), float(r["h"])]
                          for r in rows])

    return Recording(video=VideoClip(frames, fps), ppg=ppg, hr=hr,
                     boxes=boxes, subject=subject)


def save_dataset(path, recordings) -> None:
    path = Path(path)
    for i, rec in enumerate(recordings):
        save_recording(path / f"rec_{i:03d}", rec)


def load_dataset(path) -> list[Recording]:
    path = Path(path)
    dirs = sorted(p for p in path.iterdir() if (p / "video.rpv").exists())
    if not dirs:
        raise ValueError(f"no recordings under {path}")
    return [load_recording(p) for p in dirs]


# ---------------------------------------------------------------------------
# Heart-rate stability audit
# ---------------------------------------------------------------------------

def audit_hr_stability(recordings, deltas_s=(2.5, 5.0, 10.0, 15.0),
                       quantiles=(0.05, 0.5, 0.95)) -> dict[float, tuple[float, ...]]:
    """Distribution of |HR(t+delta) - HR(t)| pooled over recordings.

    Recordings without an HR series fall back to a sliding spectral estimate
    of the ground-truth pulse.  Returns {delta_s: quantile values}.
    """
    series = []
    for rec in recordings:
        hr = rec.hr
        if hr is None:
            ppg = rec.ppg
            if ppg is None:
                continue
            hr = _sliding_hr(ppg, rec.fps)
        series.append((hr, rec.fps))
    if not series:
        raise ValueError("no recording carries ground truth to audit")
    out = {}
    for delta in deltas_s:
        diffs = []
        for hr, fps in series:
            lag = int(round(delta * fps))
            if lag < 1 or lag >= hr.size:
                continue
            diffs.append(np.abs(hr[lag:] - hr[:-lag]))
        if not diffs:
            raise ValueError(f"recordings shorter than delta {delta}s")
        pooled = np.concatenate(diffs)
        out[delta] = tuple(float(np.quantile(pooled, q)) for q in quantiles)
    return out


def _sliding_hr(ppg: PpgSignal, fps: float, window_s: float = 10.0,
                stride_s: float = 0.5) -> np.ndarray:
    from .spectral import estimate_hr

    n = len(ppg)
    win = int(round(window_s * fps))
    stride = max(int(round(stride_s * fps)), 1)
    centers = []
    values = []
    start = 0
    while start + win <= n:
        seg = PpgSignal(ppg.samples[start:start + win], fps)
        centers.append(start + win // 2)
        values.append(estimate_hr(seg))
        start += stride
    if not values:
        raise ValueError("recording shorter than the sliding HR window")
    return np.interp(np.arange(n), centers, values)
