"""Pulse estimator architectures built on the graph engine.

Two variants:

* ``physnet_mini`` - a reduced-scale spatiotemporal encoder/decoder CNN.
  The encoder stacks conv+norm+elu blocks with average pooling (exactly two
  stages pool time by 2); the decoder restores the original length with two
  {linear x2 temporal upsample, (3,1,1) conv} stages, collapses space with
  an adaptive average pool, and maps to one channel with a 1x1x1 conv.
* ``spatial_pool`` - a single learnable spatial weight map (softmax
  reparameterized, so weights are nonnegative and sum to one); the output
  is the weighted spatial mean of the channel-averaged frames.  Its weight
  map doubles as a direct localization readout.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .graph import (
    AdaptiveAvgPoolSpatial,
    AvgPool3d,
    ChannelAffineNorm,
    Conv3d,
    Elu,
    Graph,
    GraphError,
    Scale,
    UpsampleTemporalLinear,
)
from .spectral import PpgSignal
from .video import VideoClip

VARIANTS = ("physnet_mini", "spatial_pool")

# Pooling pattern of the four encoder stages at full scale; truncation keeps
# the two time-halving stages so the decoder's two x2 upsamplings always
# invert them.
_POOL_PATTERN = [(1, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2)]


@dataclass(frozen=True)
class EstimatorConfig:
    """Architecture settings; defaults are desk-scale (trainable on a CPU)."""

    variant: str = "physnet_mini"
    channels: int = 8
    blocks: int = 2
    in_channels: int = 3
    height: int = 64
    width: int = 64
    t_frames: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.variant == "physnet_mini":
            if not 2 <= self.blocks <= 4:
                raise ValueError("blocks must be between 2 and 4")
            if self.height % (1 << self.blocks) or self.width % (1 << self.blocks):
                raise ValueError(
                    f"frame size {self.height}x{self.width} not divisible by 2^{self.blocks}")
            if self.t_frames is not None and self.t_frames % 4:
                raise ValueError(f"t_frames {self.t_frames} not divisible by 4")

    @property
    def t_multiple(self) -> int:
        """Clip lengths must be a multiple of this (two x2 temporal pools)."""
        return 4 if self.variant == "physnet_mini" else 1


def build(config: EstimatorConfig, rng: np.random.Generator) -> Graph:
    """Construct an initialized estimator graph for the given config."""
    if config.variant == "spatial_pool":
        return _build_spatial_pool(config, rng)
    return _build_physnet_mini(config, rng)


def _build_spatial_pool(config: EstimatorConfig, rng) -> Graph:
    c = config.in_channels
    mean_weights = np.full((1, c, 1, 1, 1), 1.0 / c)
    channel_mean = Conv3d(c, 1, kernel=(1, 1, 1), bias=False, trainable=False)
    layers = [
        channel_mean,
        Scale((1, 1, config.height, config.width), spatial_softmax=True),
        AdaptiveAvgPoolSpatial(),
    ]
    graph = Graph(layers, rng=rng)
    graph.update_params({"layer00.weight": mean_weights})
    return graph


def _build_physnet_mini(config: EstimatorConfig, rng) -> Graph:
    ch = config.channels
    stem_ch = max(ch // 2, 1)
    pools = _POOL_PATTERN[:config.blocks] if config.blocks >= 3 else _POOL_PATTERN[1:1 + config.blocks]

    def conv_block(cin, cout, kernel, pad):
        return [Conv3d(cin, cout, kernel=kernel, pad=pad),
                ChannelAffineNorm(cout), Elu()]

    layers = []
    layers += conv_block(config.in_channels, stem_ch, (1, 5, 5), (0, 2, 2))
    layers.append(AvgPool3d(pools[0]))
    layers += conv_block(stem_ch, ch, (3, 3, 3), (1, 1, 1))
    for pool in pools[1:]:
        layers += conv_block(ch, ch, (3, 3, 3), (1, 1, 1))
        layers.append(AvgPool3d(pool))
        layers += conv_block(ch, ch, (3, 3, 3), (1, 1, 1))
    layers += conv_block(ch, ch, (3, 3, 3), (1, 1, 1))
    for _ in range(2):
        layers.append(UpsampleTemporalLinear(2))
        layers += conv_block(ch, ch, (3, 1, 1), (1, 0, 0))
    layers.append(AdaptiveAvgPoolSpatial())
    layers.append(Conv3d(ch, 1, kernel=(1, 1, 1)))
    return Graph(layers, rng=rng)


def clip_to_input(clip: VideoClip) -> np.ndarray:
    """(T, H, W, C) pixels to the model's (T, C, H, W) float64 layout."""
    return np.ascontiguousarray(np.transpose(clip.to_float(), (0, 3, 1, 2)))


def input_to_clip_grad(grad: np.ndarray) -> np.ndarray:
    """Model-layout gradient back to the (T, H, W, C) clip layout."""
    return np.transpose(grad, (0, 2, 3, 1))


def check_clip_shape(config: EstimatorConfig, clip: VideoClip) -> None:
    t, h, w, c = clip.frames.shape
    if (h, w, c) != (config.height, config.width, config.in_channels):
        raise ValueError(
            f"clip shape {clip.frames.shape[1:]} does not match model input "
            f"({config.height}, {config.width}, {config.in_channels})")
    if t % config.t_multiple:
        raise ValueError(f"clip length {t} not divisible by {config.t_multiple}")


def predict_ppg(graph: Graph, clip: VideoClip, config: EstimatorConfig) -> PpgSignal:
    """Run the estimator over a clip, yielding a pulse signal at the clip's
    frame rate (one sample per frame)."""
    check_clip_shape(config, clip)
    out, _ = graph.forward_tape(clip_to_input(clip))
    return PpgSignal(out.reshape(-1), clip.fps)


def spatial_weight_map(graph: Graph, config: EstimatorConfig) -> np.ndarray:
    """The (H, W) softmax weight map of a spatial_pool model; sums to one."""
    if config.variant != "spatial_pool":
        raise ValueError("weight map readout only exists for spatial_pool")
    raw = graph.params["layer01.weight"].reshape(-1)
    z = raw - raw.max()
    e = np.exp(z)
    return (e / e.sum()).reshape(config.height, config.width)


@dataclass
class PulseModel:
    """An estimator graph plus its config and optional saliency front end."""

    graph: Graph
    config: EstimatorConfig
    saliency_net: Graph | None = None
    warp_sigma: float | None = None

    def predict(self, clip: VideoClip) -> PpgSignal:
        if self.saliency_net is not None:
            from .saliency import compute_map, warp
            clip = warp(clip, compute_map(self.saliency_net, clip), self.warp_sigma)
        return predict_ppg(self.graph, clip, self.config)


_CONFIG_FIELDS = ("variant", "channels", "blocks", "in_channels", "height", "width", "t_frames")


def save_model(path, model: PulseModel) -> None:
    """Write params.plck plus a key=value config sidecar (and the saliency
    net alongside, when present)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model.graph.save(path / "params.plck")
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(model.config, name)
        if value is not None:
            lines.append(f"{name}={value}")
    if model.warp_sigma is not None:
        lines.append(f"warp_sigma={model.warp_sigma}")
    (path / "config.txt").write_text("\n".join(lines) + "\n")
    if model.saliency_net is not None:
        model.saliency_net.save(path / "saliency.plck")


def load_model(path) -> PulseModel:
    path = Path(path)
    fields: dict = {}
    warp_sigma = None
    for line in (path / "config.txt").read_text().splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, value = line.split("=", 1)
        if key == "variant":
            fields[key] = value
        elif key == "warp_sigma":
            warp_sigma = float(value)
        elif key in _CONFIG_FIELDS:
            fields[key] = int(value)
    config = EstimatorConfig(**fields)
    graph = build(config, np.random.default_rng(0))
    graph.load(path / "params.plck")
    saliency_net = None
    if (path / "saliency.plck").exists():
        from .graph import load_params
        from .saliency import build_saliency_net
        sal_params = load_params(path / "saliency.plck")
        width = sal_params["layer00.weight"].shape[0]
        saliency_net = build_saliency_net(config.in_channels, width=width,
                                          rng=np.random.default_rng(0))
        saliency_net.update_params(sal_params)
    return PulseModel(graph=graph, config=config, saliency_net=saliency_net,
                      warp_sigma=warp_sigma)
