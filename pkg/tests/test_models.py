"""Estimator architecture tests: shapes, exactness cases, gradients,
persistence."""

import numpy as np
import pytest

from pulselearn.graph import grad_check
from pulselearn.models import (
    EstimatorConfig,
    PulseModel,
    build,
    load_model,
    predict_ppg,
    save_model,
    spatial_weight_map,
)
from pulselearn.video import VideoClip

FS = 30.0


def physnet_cfg(**kw):
    base = dict(variant="physnet_mini", channels=4, blocks=2,
                in_channels=1, height=16, width=16)
    base.update(kw)
    return EstimatorConfig(**base)


def pool_cfg(**kw):
    base = dict(variant="spatial_pool", in_channels=1, height=8, width=8)
    base.update(kw)
    return EstimatorConfig(**base)


class TestBuild:
    def test_physnet_output_length_matches_input(self):
        cfg = EstimatorConfig(variant="physnet_mini", channels=4, blocks=2,
                              in_channels=3, height=64, width=64)
        graph = build(cfg, np.random.default_rng(0))
        assert graph.out_shape((32, 3, 64, 64)) == (32, 1, 1, 1)

    @pytest.mark.parametrize("t", [8, 20, 32])
    @pytest.mark.parametrize("blocks", [2, 3, 4])
    def test_length_preserved_across_blocks(self, t, blocks):
        cfg = physnet_cfg(blocks=blocks)
        graph = build(cfg, np.random.default_rng(1))
        assert graph.out_shape((t, 1, 16, 16))[0] == t

    def test_bad_t_frames_rejected(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            physnet_cfg(t_frames=30)

    def test_frame_size_divisibility(self):
        with pytest.raises(ValueError, match="not divisible"):
            physnet_cfg(height=20, width=20, blocks=3)

    def test_same_seed_identical_parameters(self):
        cfg = physnet_cfg()
        a = build(cfg, np.random.default_rng(7))
        b = build(cfg, np.random.default_rng(7))
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="variant"):
            EstimatorConfig(variant="resnet")


class TestSpatialPool:
    def test_uniform_weights_reproduce_common_trace(self):
        cfg = pool_cfg()
        graph = build(cfg, np.random.default_rng(2))
        # uniform logits -> uniform softmax weights
        graph.update_params({"layer01.weight": np.zeros((1, 1, 8, 8))})
        t = np.arange(24) / FS
        trace = np.sin(2 * np.pi * 1.5 * t)
        frames = np.tile(trace[:, None, None, None], (1, 8, 8, 1))
        out = predict_ppg(graph, VideoClip(frames, FS), cfg)
        np.testing.assert_allclose(out.samples, trace, atol=1e-12)

    def test_point_mass_reads_single_pixel(self):
        cfg = pool_cfg()
        graph = build(cfg, np.random.default_rng(3))
        logits = np.zeros((1, 1, 8, 8))
        logits[0, 0, 3, 5] = 50.0  # softmax saturates to a point mass
        graph.update_params({"layer01.weight": logits})
        rng = np.random.default_rng(4)
        frames = rng.random((16, 8, 8, 1))
        out = predict_ppg(graph, VideoClip(frames, FS), cfg)
        np.testing.assert_allclose(out.samples, frames[:, 3, 5, 0], atol=1e-9)

    def test_weight_map_sums_to_one(self):
        cfg = pool_cfg()
        graph = build(cfg, np.random.default_rng(5))
        wm = spatial_weight_map(graph, cfg)
        assert wm.shape == (8, 8)
        assert wm.sum() == pytest.approx(1.0)
        assert np.all(wm >= 0)

    def test_channel_mean_frozen(self):
        cfg = pool_cfg(in_channels=3)
        graph = build(cfg, np.random.default_rng(6))
        assert "layer00.weight" not in graph.trainable_param_names()
        assert "layer01.weight" in graph.trainable_param_names()

    def test_linear_in_input_for_fixed_weights(self):
        cfg = pool_cfg()
        graph = build(cfg, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        x = rng.random((12, 1, 8, 8))
        y = rng.random((12, 1, 8, 8))
        fx, _ = graph.forward_tape(x)
        fy, _ = graph.forward_tape(y)
        fxy, _ = graph.forward_tape(2.0 * x - 0.5 * y)
        np.testing.assert_allclose(fxy, 2.0 * fx - 0.5 * fy, atol=1e-12)


class TestPredict:
    def test_constant_clip_near_constant_output(self):
        # translation-invariant layers on constant input: exactly constant
        # outside the temporal receptive radius of the zero-padded convs
        cfg = physnet_cfg()
        graph = build(cfg, np.random.default_rng(9))
        clip = VideoClip(np.full((64, 16, 16, 1), 0.5), FS)
        out = predict_ppg(graph, clip, cfg)
        assert len(out) == 64
        assert np.ptp(out.samples[20:-20]) < 1e-12

    def test_constant_clip_spatial_pool_exactly_constant(self):
        cfg = pool_cfg()
        graph = build(cfg, np.random.default_rng(9))
        out = predict_ppg(graph, VideoClip(np.full((8, 8, 8, 1), 0.5), FS), cfg)
        assert np.ptp(out.samples) == 0.0

    def test_shape_mismatch_rejected(self):
        cfg = physnet_cfg()
        graph = build(cfg, np.random.default_rng(10))
        with pytest.raises(ValueError, match="does not match"):
            predict_ppg(graph, VideoClip(np.zeros((8, 8, 8, 1)), FS), cfg)
        with pytest.raises(ValueError, match="divisible"):
            predict_ppg(graph, VideoClip(np.zeros((9, 16, 16, 1)), FS), cfg)

    def test_uint8_clip_accepted(self):
        cfg = pool_cfg()
        graph = build(cfg, np.random.default_rng(11))
        frames = np.random.default_rng(12).integers(0, 255, (8, 8, 8, 1), dtype=np.uint8)
        out = predict_ppg(graph, VideoClip(frames, FS), cfg)
        assert np.all(out.samples <= 1.0)


class TestGradients:
    def test_tiny_physnet_full_grad_check(self):
        cfg = EstimatorConfig(variant="physnet_mini", channels=2, blocks=2,
                              in_channels=1, height=8, width=8)
        rng = np.random.default_rng(13)
        graph = build(cfg, rng)
        x = rng.standard_normal((8, 1, 8, 8))
        report = grad_check(graph, x, tol=1e-3, rng=rng, include_input=False)
        assert report.passed, report.max_error

    def test_spatial_pool_grad_check(self):
        cfg = pool_cfg()
        rng = np.random.default_rng(14)
        graph = build(cfg, rng)
        x = rng.standard_normal((6, 1, 8, 8))
        report = grad_check(graph, x, tol=1e-4, rng=rng)
        assert report.passed, report.max_error


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        cfg = physnet_cfg()
        graph = build(cfg, np.random.default_rng(15))
        model = PulseModel(graph=graph, config=cfg)
        save_model(tmp_path / "run", model)
        loaded = load_model(tmp_path / "run")
        assert loaded.config == cfg
        for name in graph.params:
            assert np.array_equal(loaded.graph.params[name], graph.params[name])
        rng = np.random.default_rng(16)
        clip = VideoClip(rng.random((8, 16, 16, 1)), FS)
        np.testing.assert_array_equal(loaded.predict(clip).samples,
                                      model.predict(clip).samples)

    def test_sidecar_is_plain_text(self, tmp_path):
        cfg = pool_cfg()
        model = PulseModel(graph=build(cfg, np.random.default_rng(17)), config=cfg)
        save_model(tmp_path / "run", model)
        text = (tmp_path / "run" / "config.txt").read_text()
        assert "variant=spatial_pool" in text
        assert "height=8" in text
