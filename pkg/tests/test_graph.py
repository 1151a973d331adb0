"""Gradient-engine tests: forward examples, finite-difference oracles,
linearity, determinism, and checkpoint round trips."""

import numpy as np
import pytest

from pulselearn.graph import (
    Add,
    AdaptiveAvgPoolSpatial,
    AvgPool3d,
    ChannelAffineNorm,
    Conv3d,
    Elu,
    Graph,
    GraphError,
    Scale,
    SoftmaxSpatial,
    UpsampleTemporalLinear,
    grad_check,
    load_params,
    save_params,
)


def finite_diff(graph, x, v, step=1e-5):
    """Independent oracle: central differences of the projected output."""

    def objective():
        y, _ = graph.forward_tape(x)
        return float((v * y).sum())

    param_fd = {}
    for name, param in graph.params.items():
        g = np.zeros_like(param)
        flat_p = param.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            hi = objective()
            flat_p[i] = orig - step
            lo = objective()
            flat_p[i] = orig
            flat_g[i] = (hi - lo) / (2 * step)
        param_fd[name] = g
    input_fd = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = input_fd.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        hi = objective()
        flat_x[i] = orig - step
        lo = objective()
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2 * step)
    return param_fd, input_fd


def rel_err(a, b):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def make_layer(kind, rng):
    c = 2
    if kind == "conv3d":
        return Conv3d(c, 3, kernel=(2, 3, 3), stride=1, pad=(1, 1, 1)), (4, c, 5, 5)
    if kind == "conv3d_strided":
        return Conv3d(c, 2, kernel=(1, 3, 3), stride=(1, 2, 2), pad=(0, 1, 1)), (3, c, 6, 6)
    if kind == "avgpool3d":
        return AvgPool3d((2, 2, 2)), (4, c, 4, 4)
    if kind == "adaptive_avgpool_spatial":
        return AdaptiveAvgPoolSpatial(), (3, c, 4, 5)
    if kind == "elu":
        return Elu(), (3, c, 4, 4)
    if kind == "channel_affine_norm":
        return ChannelAffineNorm(c), (4, c, 3, 3)
    if kind == "upsample_temporal_linear":
        return UpsampleTemporalLinear(2), (4, c, 3, 3)
    if kind == "softmax_spatial":
        return SoftmaxSpatial(), (3, c, 3, 3)
    if kind == "add":
        return Add((1, c, 1, 1)), (3, c, 4, 4)
    if kind == "scale":
        return Scale((1, 1, 4, 4)), (3, c, 4, 4)
    if kind == "scale_softmax":
        return Scale((1, 1, 4, 4), spatial_softmax=True), (3, c, 4, 4)
    raise ValueError(kind)


ALL_KINDS = [
    "conv3d", "conv3d_strided", "avgpool3d", "adaptive_avgpool_spatial", "elu",
    "channel_affine_norm", "upsample_temporal_linear", "softmax_spatial",
    "add", "scale", "scale_softmax",
]


class TestForwardExamples:
    def test_elu_values(self):
        g = Graph([Elu()])
        x = np.array([-1.0, 0.0, 1.0]).reshape(3, 1, 1, 1)
        y = g.forward(x).ravel()
        np.testing.assert_allclose(y, [np.expm1(-1.0), 0.0, 1.0], atol=1e-15)

    def test_avgpool_constant(self):
        g = Graph([AvgPool3d((1, 2, 2))])
        x = np.full((2, 1, 4, 4), 3.25)
        y = g.forward(x)
        assert y.shape == (2, 1, 2, 2)
        np.testing.assert_allclose(y, 3.25)

    def test_conv_identity(self):
        layer = Conv3d(1, 1, kernel=(1, 1, 1))
        g = Graph([layer])
        g.update_params({"layer00.weight": np.ones((1, 1, 1, 1, 1)),
                         "layer00.bias": np.zeros(1)})
        x = np.random.default_rng(0).standard_normal((3, 1, 4, 4))
        np.testing.assert_array_equal(g.forward(x), x)

    def test_scale_param_grad_is_sum_g_x(self):
        g = Graph([Scale(shape=(1, 1, 1, 1))])
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 1, 3, 3))
        v = rng.standard_normal((2, 1, 3, 3))
        g.forward(x)
        grads, _ = g.backward(v)
        np.testing.assert_allclose(grads["layer00.weight"].ravel()[0], (v * x).sum())

    def test_elu_positive_unit_slope(self):
        g = Graph([Elu()])
        x = np.full((2, 1, 2, 2), 1.5)
        g.forward(x)
        v = np.random.default_rng(2).standard_normal(x.shape)
        _, dx = g.backward(v)
        np.testing.assert_array_equal(dx, v)

    def test_softmax_uniform(self):
        g = Graph([SoftmaxSpatial()])
        y = g.forward(np.zeros((2, 1, 4, 4)))
        np.testing.assert_allclose(y, 1.0 / 16)


class TestBackwardMatchesFiniteDifferences:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_layer_gradients(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        layer, shape = make_layer(kind, rng)
        g = Graph([layer], rng=rng)
        x = rng.standard_normal(shape)
        v = rng.standard_normal(g.out_shape(shape))
        y, tape = g.forward_tape(x)
        analytic, dx = g.backward_tape(tape, v)
        fd_params, fd_x = finite_diff(g, x, v)
        for name in g.params:
            an = analytic.get(name, np.zeros_like(g.params[name]))
            assert rel_err(an, fd_params[name]) < 1e-4, name
        assert rel_err(dx, fd_x) < 1e-4

    def test_random_two_layer_graph(self):
        rng = np.random.default_rng(7)
        g = Graph([Conv3d(2, 2, kernel=(1, 3, 3), pad=(0, 1, 1)), Elu()], rng=rng)
        x = rng.standard_normal((3, 2, 4, 4))
        report = grad_check(g, x, tol=1e-4, rng=rng)
        assert report.passed, report.per_param


class TestGradCheckApi:
    def test_conv3d_passes(self):
        rng = np.random.default_rng(3)
        g = Graph([Conv3d(2, 2, kernel=(3, 3, 3), pad=1)], rng=rng)
        x = rng.standard_normal((4, 2, 4, 4))
        assert grad_check(g, x, tol=1e-4, rng=rng).passed

    def test_upsample_exact(self):
        rng = np.random.default_rng(4)
        g = Graph([UpsampleTemporalLinear(2)], rng=rng)
        x = rng.standard_normal((4, 1, 2, 2))
        report = grad_check(g, x, tol=1e-6, rng=rng)
        assert report.passed, report.max_error

    def test_elu_locally_linear_region(self):
        rng = np.random.default_rng(5)
        g = Graph([Elu()], rng=rng)
        x = 0.1 + rng.uniform(0.1, 1.0, size=(3, 1, 3, 3))
        assert grad_check(g, x, tol=1e-6, rng=rng).passed

    def test_backward_before_forward_errors(self):
        g = Graph([Elu()])
        with pytest.raises(GraphError, match="before forward"):
            g.backward(np.zeros((1, 1, 1, 1)))

    def test_shape_mismatch_names_layer(self):
        g = Graph([Elu(), Conv3d(3, 1, kernel=(1, 1, 1))])
        with pytest.raises(GraphError, match="layer 1"):
            g.forward(np.zeros((2, 2, 3, 3)))

    def test_param_budget_guard(self):
        g = Graph([Scale((1, 1, 110, 110))])
        with pytest.raises(GraphError, match="1e4"):
            grad_check(g, np.zeros((1, 1, 110, 110)))

    def test_non_finite_input_rejected(self):
        g = Graph([Elu()])
        x = np.zeros((1, 1, 2, 2))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(GraphError, match="non-finite"):
            grad_check(g, x)


class TestProperties:
    def test_linearity_of_linear_layer_graphs(self):
        # conv without bias, pooling, upsampling, and plain scaling are linear
        rng = np.random.default_rng(11)
        g = Graph([
            Conv3d(1, 2, kernel=(1, 3, 3), pad=(0, 1, 1), bias=False),
            AvgPool3d((2, 2, 2)),
            UpsampleTemporalLinear(2),
            AdaptiveAvgPoolSpatial(),
            Scale((1, 2, 1, 1)),
        ], rng=rng)
        x = rng.standard_normal((4, 1, 4, 4))
        y = rng.standard_normal((4, 1, 4, 4))
        a, b = 1.7, -0.3
        lhs, _ = g.forward_tape(a * x + b * y)
        fx, _ = g.forward_tape(x)
        fy, _ = g.forward_tape(y)
        np.testing.assert_allclose(lhs, a * fx + b * fy, atol=1e-10)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            g = Graph([Conv3d(2, 2, kernel=(1, 3, 3), pad=(0, 1, 1)),
                       ChannelAffineNorm(2), Elu()], rng=rng)
            x = rng.standard_normal((3, 2, 4, 4))
            y, tape = g.forward_tape(x)
            grads, dx = g.backward_tape(tape, np.ones_like(y))
            return y, grads, dx

        y1, g1, dx1 = run()
        y2, g2, dx2 = run()
        assert np.array_equal(y1, y2) and np.array_equal(dx1, dx2)
        for name in g1:
            assert np.array_equal(g1[name], g2[name])

    def test_same_seed_same_init(self):
        layers = lambda: [Conv3d(1, 2, kernel=(1, 3, 3)), ChannelAffineNorm(2)]
        a = Graph(layers(), rng=np.random.default_rng(9))
        b = Graph(layers(), rng=np.random.default_rng(9))
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(13)
        g = Graph([Conv3d(2, 3, kernel=(1, 3, 3)), ChannelAffineNorm(3)], rng=rng)
        path = tmp_path / "model.plck"
        g.save(path)
        loaded = load_params(path)
        assert set(loaded) == set(g.params)
        for name in g.params:
            assert np.array_equal(loaded[name], g.params[name])
        g2 = Graph([Conv3d(2, 3, kernel=(1, 3, 3)), ChannelAffineNorm(3)],
                   rng=np.random.default_rng(99))
        g2.load(path)
        for name in g.params:
            assert np.array_equal(g2.params[name], g.params[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.plck"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(GraphError, match="PLCK"):
            load_params(path)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(14)
        g = Graph([Scale((1, 1, 2, 2))], rng=rng)
        path = tmp_path / "model.plck"
        g.save(path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(GraphError, match="truncated"):
            load_params(path)

    def test_mismatched_names_rejected(self, tmp_path):
        path = tmp_path / "other.plck"
        save_params(path, {"somewhere.weight": np.zeros(3)})
        g = Graph([Scale((1, 1, 2, 2))])
        with pytest.raises(GraphError, match="mismatch"):
            g.load(path)
