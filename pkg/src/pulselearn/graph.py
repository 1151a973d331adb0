"""Minimal reverse-mode gradient engine over dense float64 arrays.

A :class:`Graph` is an ordered chain of layers with a single input and a
single output.  Video activations use the (T, C, H, W) layout.  The layer
set is exactly what the pulse estimator and the saliency network need; this
is not a general autodiff system (no arbitrary DAGs, no higher-order
gradients).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

CHECKPOINT_MAGIC = b"PLCK"
CHECKPOINT_VERSION = 1

# Per-channel standardization guard; keeps constant inputs finite.
NORM_EPS = 1e-5


class GraphError(ValueError):
    """Malformed graph, shape mismatch, or bad call order."""


def as_tensor(data) -> np.ndarray:
    """Coerce to a contiguous float64 array of order <= 5 with finite values."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim > 5:
        raise GraphError(f"tensor order {arr.ndim} exceeds 5")
    if not np.all(np.isfinite(arr)):
        raise GraphError("tensor contains non-finite values")
    return arr


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over the axes a parameter of `shape` was broadcast along."""
    out = grad
    while out.ndim > len(shape):
        out = out.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return np.ascontiguousarray(out)


def _triple(value) -> tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise GraphError(f"expected an integer triple, got {value!r}")
    return t


class Layer:
    """One node of the chain.  Subclasses implement the actual math."""

    kind = "base"

    def __init__(self):
        self.index = -1
        self.trainable = True

    def _attach(self, index: int) -> None:
        self.index = index

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, params: dict):
        raise NotImplementedError

    def backward(self, grad: np.ndarray, cache, params: dict):
        raise NotImplementedError

    def _require_video(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise GraphError(f"{self.kind} expects a (T, C, H, W) input, got shape {x.shape}")


class Conv3d(Layer):
    """3-D convolution over (T, H, W) mixing channels, stride and zero padding."""

    kind = "conv3d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 bias=True, trainable=True):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _triple(kernel)
        self.stride = _triple(stride)
        self.pad = _triple(pad)
        self.has_bias = bool(bias)
        self.trainable = trainable
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.pad) < 0:
            raise GraphError("conv3d kernel/stride must be positive, pad nonnegative")

    def param_shapes(self):
        shapes = {"weight": (self.out_channels, self.in_channels) + self.kernel}
        if self.has_bias:
            shapes["bias"] = (self.out_channels,)
        return shapes

    def init_params(self, rng):
        kt, kh, kw = self.kernel
        fan_in = self.in_channels * kt * kh * kw
        params = {"weight": _uniform_fan_in(rng, self.param_shapes()["weight"], fan_in)}
        if self.has_bias:
            params["bias"] = np.zeros(self.out_channels, dtype=DTYPE)
        return params

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise GraphError(f"conv3d expects 4-d input, got {in_shape}")
        t, c, h, w = in_shape
        if c != self.in_channels:
            raise GraphError(f"conv3d expects {self.in_channels} channels, got {c}")
        kt, kh, kw = self.kernel
        st, sh, sw = self.stride
        pt, ph, pw = self.pad
        to = (t + 2 * pt - kt) // st + 1
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if to < 1 or ho < 1 or wo < 1:
            raise GraphError(f"conv3d kernel {self.kernel} too large for input {in_shape}")
        return (to, self.out_channels, ho, wo)

    def _slices(self, dt, dh, dw, out_shape):
        to, _, ho, wo = out_shape
        st, sh, sw = self.stride
        return (slice(dt, dt + (to - 1) * st + 1, st),
                slice(None),
                slice(dh, dh + (ho - 1) * sh + 1, sh),
                slice(dw, dw + (wo - 1) * sw + 1, sw))

    def forward(self, x, params):
        self._require_video(x)
        out_shape = self.out_shape(x.shape)
        pt, ph, pw = self.pad
        xp = np.pad(x, ((pt, pt), (0, 0), (ph, ph), (pw, pw)))
        w = params["weight"]
        out = np.zeros(out_shape, dtype=DTYPE)
        kt, kh, kw = self.kernel
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    xs = xp[self._slices(dt, dh, dw, out_shape)]
                    # (To,C,Ho,Wo) x (O,C) -> (To,Ho,Wo,O)
                    part = np.tensordot(xs, w[:, :, dt, dh, dw], axes=([1], [1]))
                    out += np.moveaxis(part, 3, 1)
        if self.has_bias:
            out += params["bias"].reshape(1, -1, 1, 1)
        return out, (xp, x.shape, out_shape)

    def backward(self, grad, cache, params):
        xp, in_shape, out_shape = cache
        w = params["weight"]
        kt, kh, kw = self.kernel
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for dt in range(kt):
            for dh in range(kh):
                for dw_ in range(kw):
                    sl = self._slices(dt, dh, dw_, out_shape)
                    xs = xp[sl]
                    dw[:, :, dt, dh, dw_] = np.tensordot(grad, xs, axes=([0, 2, 3], [0, 2, 3]))
                    part = np.tensordot(grad, w[:, :, dt, dh, dw_], axes=([1], [0]))
                    dxp[sl] += np.moveaxis(part, 3, 1)
        pt, ph, pw = self.pad
        t, _, h, wd = in_shape
        dx = dxp[pt:pt + t, :, ph:ph + h, pw:pw + wd]
        grads = {"weight": dw}
        if self.has_bias:
            grads["bias"] = grad.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(dx), grads


class AvgPool3d(Layer):
    """Non-overlapping average pooling; kernel equals stride, no padding."""

    kind = "avgpool3d"

    def __init__(self, kernel):
        super().__init__()
        self.kernel = _triple(kernel)
        if min(self.kernel) < 1:
            raise GraphError("avgpool3d kernel must be positive")

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise GraphError(f"avgpool3d expects 4-d input, got {in_shape}")
        t, c, h, w = in_shape
        kt, kh, kw = self.kernel
        if t % kt or h % kh or w % kw:
            raise GraphError(f"avgpool3d kernel {self.kernel} does not divide input {in_shape}")
        return (t // kt, c, h // kh, w // kw)

    def forward(self, x, params):
        self._require_video(x)
        to, c, ho, wo = self.out_shape(x.shape)
        kt, kh, kw = self.kernel
        y = x.reshape(to, kt, c, ho, kh, wo, kw).mean(axis=(1, 4, 6))
        return y, x.shape

    def backward(self, grad, cache, params):
        in_shape = cache
        kt, kh, kw = self.kernel
        scale = 1.0 / (kt * kh * kw)
        g = grad[:, None, :, :, None, :, None] * scale
        to, c, ho, wo = grad.shape
        dx = np.broadcast_to(g, (to, kt, c, ho, kh, wo, kw)).reshape(in_shape)
        return np.ascontiguousarray(dx), {}


class AdaptiveAvgPoolSpatial(Layer):
    """Exact mean over H and W, collapsing the spatial grid to 1x1."""

    kind = "adaptive_avgpool_spatial"

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise GraphError(f"adaptive_avgpool_spatial expects 4-d input, got {in_shape}")
        t, c, _, _ = in_shape
        return (t, c, 1, 1)

    def forward(self, x, params):
        self._require_video(x)
        return x.mean(axis=(2, 3), keepdims=True), x.shape

    def backward(self, grad, cache, params):
        in_shape = cache
        scale = 1.0 / (in_shape[2] * in_shape[3])
        dx = np.broadcast_to(grad * scale, in_shape)
        return np.ascontiguousarray(dx), {}


class Elu(Layer):
    kind = "elu"

    def forward(self, x, params):
        y = np.where(x > 0, x, np.expm1(x))
        return y, y

    def backward(self, grad, cache, params):
        y = cache
        return grad * np.where(y > 0, 1.0, y + 1.0), {}


class ChannelAffineNorm(Layer):
    """Per-channel standardization over (T, H, W) followed by a learned affine.

    Statistics come from the sample itself rather than a running batch
    estimate, so inference needs no extra state.
    """

    kind = "channel_affine_norm"

    def __init__(self, channels):
        super().__init__()
        self.channels = int(channels)

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def init_params(self, rng):
        return {"gamma": np.ones(self.channels, dtype=DTYPE),
                "beta": np.zeros(self.channels, dtype=DTYPE)}

    def out_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[1] != self.channels:
            raise GraphError(f"channel_affine_norm expects {self.channels} channels, got {in_shape}")
        return in_shape

    def forward(self, x, params):
        self._require_video(x)
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu) * inv
        y = params["gamma"].reshape(1, -1, 1, 1) * xhat + params["beta"].reshape(1, -1, 1, 1)
        return y, (xhat, inv)

    def backward(self, grad, cache, params):
        xhat, inv = cache
        gamma = params["gamma"].reshape(1, -1, 1, 1)
        dgamma = (grad * xhat).sum(axis=(0, 2, 3))
        dbeta = grad.sum(axis=(0, 2, 3))
        gx = grad * gamma
        mean_gx = gx.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx_xhat = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
        dx = inv * (gx - mean_gx - xhat * mean_gx_xhat)
        return dx, {"gamma": dgamma, "beta": dbeta}


class UpsampleTemporalLinear(Layer):
    """Linear interpolation along T by an integer factor, endpoints replicated."""

    kind = "upsample_temporal_linear"

    def __init__(self, factor=2):
        super().__init__()
        self.factor = int(factor)
        if self.factor < 1:
            raise GraphError("upsample factor must be >= 1")

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise GraphError(f"upsample_temporal_linear expects 4-d input, got {in_shape}")
        t, c, h, w = in_shape
        return (t * self.factor, c, h, w)

    def _grid(self, t_in: int):
        t_out = t_in * self.factor
        pos = (np.arange(t_out) + 0.5) / self.factor - 0.5
        pos = np.clip(pos, 0.0, t_in - 1.0)
        i0 = np.floor(pos).astype(np.intp)
        i0 = np.minimum(i0, t_in - 2) if t_in > 1 else i0
        frac = pos - i0
        return i0, frac

    def forward(self, x, params):
        self._require_video(x)
        i0, frac = self._grid(x.shape[0])
        f = frac.reshape(-1, 1, 1, 1)
        y = x[i0] * (1.0 - f) + x[i0 + 1] * f if x.shape[0] > 1 else np.repeat(x, self.factor, axis=0)
        return y, (x.shape, i0, frac)

    def backward(self, grad, cache, params):
        in_shape, i0, frac = cache
        dx = np.zeros(in_shape, dtype=DTYPE)
        if in_shape[0] > 1:
            f = frac.reshape(-1, 1, 1, 1)
            np.add.at(dx, i0, grad * (1.0 - f))
            np.add.at(dx, i0 + 1, grad * f)
        else:
            dx[0] = grad.sum(axis=0)
        return dx, {}


class SoftmaxSpatial(Layer):
    """Softmax over the flattened (H, W) grid, independently per (T, C)."""

    kind = "softmax_spatial"

    def forward(self, x, params):
        self._require_video(x)
        t, c, h, w = x.shape
        z = x.reshape(t, c, h * w)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)
        return s.reshape(x.shape), s

    def backward(self, grad, cache, params):
        s = cache
        t, c, hw = s.shape
        g = grad.reshape(t, c, hw)
        dot = (g * s).sum(axis=-1, keepdims=True)
        dx = s * (g - dot)
        return dx.reshape(grad.shape), {}


class Add(Layer):
    """y = x + b for a learnable tensor b broadcast against the input."""

    kind = "add"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def param_shapes(self):
        return {"bias": self.shape}

    def init_params(self, rng):
        return {"bias": np.zeros(self.shape, dtype=DTYPE)}

    def forward(self, x, params):
        return x + params["bias"], None

    def backward(self, grad, cache, params):
        return grad, {"bias": _reduce_to_shape(grad, self.shape)}


class Scale(Layer):
    """y = a * x for a learnable tensor a broadcast against the input.

    With ``spatial_softmax=True`` the raw parameter is reparameterized through
    a softmax over its (H, W) grid scaled by H*W, so the effective multiplier
    is a nonnegative map of mean one.  Composed with
    :class:`AdaptiveAvgPoolSpatial` this computes an exact weighted spatial
    mean whose weights sum to one.
    """

    kind = "scale"

    def __init__(self, shape, spatial_softmax=False):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)
        self.spatial_softmax = bool(spatial_softmax)
        if self.spatial_softmax and len(self.shape) != 4:
            raise GraphError("spatial_softmax scale expects a (1, 1, H, W) parameter")

    def param_shapes(self):
        return {"weight": self.shape}

    def init_params(self, rng):
        fan_in = int(np.prod(self.shape))
        return {"weight": _uniform_fan_in(rng, self.shape, fan_in)}

    def _softmax_weights(self, raw: np.ndarray) -> np.ndarray:
        flat = raw.reshape(-1)
        z = flat - flat.max()
        e = np.exp(z)
        return e / e.sum()

    def forward(self, x, params):
        raw = params["weight"]
        if self.spatial_softmax:
            s = self._softmax_weights(raw)
            mult = (s * s.size).reshape(self.shape)
            return mult * x, (x, s)
        return raw * x, x

    def backward(self, grad, cache, params):
        if self.spatial_softmax:
            x, s = cache
            n = s.size
            mult = (s * n).reshape(self.shape)
            dx = mult * grad
            # dL/ds_j, then the softmax Jacobian back to the raw logits
            q = _reduce_to_shape(grad * x, self.shape).reshape(-1) * n
            draw = s * (q - float(q @ s))
            return dx, {"weight": draw.reshape(self.shape)}
        x = cache
        raw = params["weight"]
        return raw * grad, {"weight": _reduce_to_shape(grad * x, self.shape)}


@dataclass
class GradCheckReport:
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    input_error: float = 0.0

    @property
    def max_error(self) -> float:
        errs = list(self.per_param.values()) + [self.input_error]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


class Graph:
    """An ordered single-input single-output chain of layers.

    Forward caches per-layer activations for the subsequent backward call, so
    one instance is single-threaded; distinct instances are independent.
    Parameters only change through :meth:`update_params`.
    """

    def __init__(self, layers, rng: np.random.Generator | None = None):
        self.layers = list(layers)
        self.params: dict[str, np.ndarray] = {}
        self._owner: dict[str, int] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, layer in enumerate(self.layers):
            layer._attach(i)
            for local, value in layer.init_params(rng).items():
                name = self._param_name(i, local)
                if name in self.params:
                    raise GraphError(f"duplicate parameter {name}")
                self.params[name] = value
                self._owner[name] = i
        self._tape = None

    @staticmethod
    def _param_name(index: int, local: str) -> str:
        return f"layer{index:02d}.{local}"

    def _layer_params(self, index: int) -> dict[str, np.ndarray]:
        layer = self.layers[index]
        return {local: self.params[self._param_name(index, local)]
                for local in layer.param_shapes()}

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def trainable_param_names(self) -> list[str]:
        return [name for name, idx in self._owner.items() if self.layers[idx].trainable]

    def out_shape(self, in_shape: tuple) -> tuple:
        shape = tuple(in_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except GraphError as exc:
                raise GraphError(f"layer {i} ({layer.kind}): {exc}") from None
        return shape

    def forward_tape(self, x: np.ndarray):
        """Pure forward pass returning (output, tape); does not touch instance state."""
        x = as_tensor(x)
        tape = []
        for i, layer in enumerate(self.layers):
            try:
                x, cache = layer.forward(x, self._layer_params(i))
            except GraphError as exc:
                raise GraphError(f"layer {i} ({layer.kind}): {exc}") from None
            tape.append(cache)
        return x, tape

    def backward_tape(self, tape, output_grad: np.ndarray):
        """Backward through a recorded tape; returns (param_grads, input_grad)."""
        grad = as_tensor(output_grad)
        param_grads: dict[str, np.ndarray] = {}
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            grad, local_grads = layer.backward(grad, tape[i], self._layer_params(i))
            for local, g in local_grads.items():
                param_grads[self._param_name(i, local)] = g
        return param_grads, grad

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, tape = self.forward_tape(x)
        self._tape = (tape, y.shape)
        return y

    def backward(self, output_grad: np.ndarray):
        if self._tape is None:
            raise GraphError("backward called before forward")
        tape, out_shape = self._tape
        output_grad = as_tensor(output_grad)
        if output_grad.shape != out_shape:
            raise GraphError(f"output_grad shape {output_grad.shape} != output shape {out_shape}")
        return self.backward_tape(tape, output_grad)

    def update_params(self, updates: dict[str, np.ndarray]) -> None:
        for name, value in updates.items():
            if name not in self.params:
                raise GraphError(f"unknown parameter {name}")
            if value.shape != self.params[name].shape:
                raise GraphError(f"parameter {name} shape mismatch")
            self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)

    def save(self, path) -> None:
        save_params(path, self.params)

    def load(self, path) -> None:
        loaded = load_params(path)
        missing = set(self.params) - set(loaded)
        extra = set(loaded) - set(self.params)
        if missing or extra:
            raise GraphError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        self.update_params(loaded)


def grad_check(graph: Graph, x: np.ndarray, tol: float = 1e-4,
               rng: np.random.Generator | None = None,
               include_input: bool = True, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The objective is a fixed random projection of the output; every parameter
    element (and optionally every input element) is perturbed by ``step``.
    """
    x = as_tensor(x)
    total = graph.num_params + (x.size if include_input else 0)
    if total > 10_000:
        raise GraphError(f"grad_check limited to 1e4 perturbations, graph has {total}")
    y, tape = graph.forward_tape(x)
    if not np.all(np.isfinite(y)):
        raise GraphError("non-finite forward value")
    rng = rng if rng is not None else np.random.default_rng(12345)
    v = rng.standard_normal(y.shape)
    analytic, dx = graph.backward_tape(tape, v)

    def objective() -> float:
        out, _ = graph.forward_tape(x)
        return float((v * out).sum())

    report = GradCheckReport(tol=tol)
    for name, param in graph.params.items():
        an = analytic.get(name, np.zeros_like(param))
        worst = 0.0
        flat = param.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = objective()
            flat[i] = orig - step
            lo = objective()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            a = an.reshape(-1)[i]
            worst = max(worst, abs(fd - a) / max(1.0, abs(fd), abs(a)))
        report.per_param[name] = worst
    if include_input:
        worst = 0.0
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = objective()
            flat[i] = orig - step
            lo = objective()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            a = dx.reshape(-1)[i]
            worst = max(worst, abs(fd - a) / max(1.0, abs(fd), abs(a)))
        report.input_error = worst
    return report


def save_params(path, params: dict[str, np.ndarray]) -> None:
    """Write parameters in the PLCK checkpoint format.

    Layout: magic "PLCK", u32 version, then per parameter (sorted by name):
    u32 name length, name bytes (utf-8), u32 rank, u32 extents, raw
    little-endian float64 values.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=DTYPE)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise GraphError(f"bad checkpoint magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise GraphError("truncated checkpoint file")
        chunk = blob[off:off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise GraphError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8")
        params[name] = data.reshape(shape).astype(DTYPE)
    return params
