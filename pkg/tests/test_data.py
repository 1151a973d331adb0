"""Dataset tests: synthetic generation, sticky crop, sampling, container IO,
and the heart-rate stability audit."""

import numpy as np
import pytest

from pulselearn.data import (
    Recording,
    SynthSpec,
    audit_hr_stability,
    buffered_boxes,
    iter_eval_windows,
    load_dataset,
    load_recording,
    sample_clip,
    save_recording,
    stretch_window,
    sticky_crop,
    synth_generate,
)
from pulselearn.losses import ipr
from pulselearn.spectral import PpgSignal, estimate_hr
from pulselearn.video import VideoClip

FS = 30.0


def small_spec(**kw):
    base = dict(duration_s=20.0, fps=FS, height=16, width=16, channels=1,
                region=(4, 4, 6, 6), base_hr=90.0, drift_bpm_s=0.0,
                amplitude=0.05, noise_std=0.0)
    base.update(kw)
    return SynthSpec(**base)


class TestSynthGenerate:
    def test_region_pixel_carries_tone(self):
        rec = synth_generate(small_spec(), np.random.default_rng(0))
        trace = PpgSignal(rec.video.frames[:, 6, 6, 0], FS)
        bin_bpm = 60.0 * FS / (8 * len(trace))
        assert abs(estimate_hr(trace) - 90.0) <= bin_bpm

    def test_outside_region_flat_without_noise(self):
        rec = synth_generate(small_spec(), np.random.default_rng(1))
        assert np.ptp(rec.video.frames[:, 0, 0, 0]) == 0.0

    def test_zero_amplitude_keeps_gt_tone(self):
        rec = synth_generate(small_spec(amplitude=0.0, noise_std=0.02),
                             np.random.default_rng(2))
        # video is pure noise but the ground truth is still a tone
        assert abs(estimate_hr(rec.ppg) - 90.0) < 1.0
        region_trace = PpgSignal(rec.video.frames[:, 6, 6, 0], FS)
        assert ipr(region_trace) > 0.5

    def test_drift_bound(self):
        spec = small_spec(duration_s=60.0, drift_bpm_s=0.4)
        rec = synth_generate(spec, np.random.default_rng(3))
        hr = rec.hr
        lag = int(round(10.0 * FS))
        assert np.max(np.abs(hr[lag:] - hr[:-lag])) <= 0.4 * 10.0 + 1e-9

    def test_nuisance_block_flashes_independently(self):
        spec = small_spec(nuisance_region=(10, 10, 4, 4), noise_std=0.0)
        rec = synth_generate(spec, np.random.default_rng(4))
        nuisance_trace = PpgSignal(rec.video.frames[:, 11, 11, 0], FS)
        hr_n = estimate_hr(nuisance_trace)
        assert 60.0 <= hr_n <= 180.0
        assert abs(hr_n - 90.0) > 1.0  # independent of the pulse tone

    def test_overlapping_regions_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            small_spec(nuisance_region=(5, 5, 4, 4))

    def test_gt_is_unit_sinusoid(self):
        rec = synth_generate(small_spec(), np.random.default_rng(5))
        assert np.max(np.abs(rec.ppg.samples)) <= 1.0


class TestStickyCrop:
    def test_static_boxes_never_update(self):
        boxes = np.tile([10.0, 10.0, 20.0, 20.0], (30, 1))
        buffered = buffered_boxes(boxes)
        assert np.ptp(buffered, axis=0).max() == 0.0

    def test_drift_within_buffer_single_recenter(self):
        # box drifts 1 px/frame; buffer has 5 px margin each side
        boxes = np.array([[10.0 + i, 10.0, 20.0, 20.0] for i in range(12)])
        buffered = buffered_boxes(boxes)
        changes = int((np.abs(np.diff(buffered[:, 0])) > 0).sum())
        assert changes == 1
        # until the exit, the buffer stays at its initial placement
        assert np.ptp(buffered[:6, 0]) == 0.0

    def test_jump_updates_immediately(self):
        boxes = np.tile([10.0, 10.0, 20.0, 20.0], (10, 1))
        boxes[5] = [40.0, 40.0, 20.0, 20.0]
        buffered = buffered_boxes(boxes)
        assert buffered[4, 0] != buffered[5, 0]

    def test_output_stable_under_jitter_inside_buffer(self):
        rng = np.random.default_rng(6)
        frames = np.tile(rng.random((1, 40, 40, 1)), (8, 1, 1, 1))
        base = np.array([12.0, 12.0, 16.0, 16.0])
        jitter = rng.uniform(-1.5, 1.5, size=(8, 2))
        boxes = np.tile(base, (8, 1))
        boxes[:, :2] += jitter
        out = sticky_crop(VideoClip(frames, FS), boxes, out_size=16)
        assert np.ptp(out.frames, axis=0).max() == 0.0

    def test_box_clamped_to_frame(self):
        frames = np.random.default_rng(7).random((4, 20, 20, 1))
        boxes = np.tile([-5.0, -5.0, 18.0, 18.0], (4, 1))
        out = sticky_crop(VideoClip(frames, FS), boxes, out_size=8)
        assert out.frames.shape == (4, 8, 8, 1)
        assert np.all(np.isfinite(out.frames))

    def test_output_size(self):
        frames = np.zeros((3, 50, 50, 2))
        boxes = np.tile([5.0, 5.0, 30.0, 30.0], (3, 1))
        out = sticky_crop(VideoClip(frames, FS), boxes)
        assert out.frames.shape == (3, 64, 64, 2)


class TestSampleClip:
    def test_no_augment_bit_equal(self):
        rec = synth_generate(small_spec(noise_std=0.02), np.random.default_rng(8))
        sample = sample_clip(rec, 10.0, np.random.default_rng(0), augment=False)
        src = rec.video.frames[sample.start:sample.start + 300]
        assert np.array_equal(sample.video.frames, src)
        assert sample.stretch == 1.0

    def test_clean_tone_never_redraws(self):
        rec = synth_generate(small_spec(), np.random.default_rng(9))
        sample = sample_clip(rec, 10.0, np.random.default_rng(1), augment=False)
        assert abs(estimate_hr(sample.ppg) - 90.0) < 1.0

    def test_max_stretch_scales_hr_by_two_thirds(self):
        rec = synth_generate(small_spec(), np.random.default_rng(10))
        out_len = 300
        sample = stretch_window(rec, 0, 200, out_len, with_labels=True)
        assert sample.stretch == pytest.approx(2.0 / 3.0)
        np.testing.assert_allclose(sample.hr, rec._hr[0] * 2.0 / 3.0, rtol=1e-9)
        bin_bpm = 60.0 * FS / (8 * out_len)
        assert abs(estimate_hr(sample.ppg) - 60.0) <= 2 * bin_bpm

    def test_out_of_band_gt_errors_after_redraws(self):
        # ground truth is a 12 bpm tone: irrelevant power ratio stays > 0.6
        n = 600
        t = np.arange(n) / FS
        video = VideoClip(np.random.default_rng(11).random((n, 4, 4, 1)), FS)
        rec = Recording(video, ppg=PpgSignal(np.sin(2 * np.pi * 0.2 * t), FS))
        with pytest.raises(ValueError, match="no clean window"):
            sample_clip(rec, 10.0, np.random.default_rng(2), augment=False)

    def test_without_labels_no_gt_access(self):
        rec = synth_generate(small_spec(), np.random.default_rng(12))
        rec.label_reads = 0
        sample = sample_clip(rec, 10.0, np.random.default_rng(3),
                             augment=True, with_labels=False)
        assert sample.ppg is None and sample.hr is None
        assert rec.label_reads == 0

    def test_short_recording_always_stretched(self):
        rec = synth_generate(small_spec(duration_s=8.0), np.random.default_rng(13))
        sample = sample_clip(rec, 10.0, np.random.default_rng(4), augment=True)
        assert sample.video.num_frames == 300
        assert sample.stretch < 1.0

    def test_too_short_rejected(self):
        rec = synth_generate(small_spec(duration_s=5.0), np.random.default_rng(14))
        with pytest.raises(ValueError, match="too short"):
            sample_clip(rec, 10.0, np.random.default_rng(5), augment=True)

    def test_gt_offset_shifts_labels(self):
        rec = synth_generate(small_spec(duration_s=30.0), np.random.default_rng(15))
        rng_a = np.random.default_rng(6)
        rng_b = np.random.default_rng(6)
        plain = sample_clip(rec, 10.0, rng_a, augment=False)
        shifted = sample_clip(rec, 10.0, rng_b, augment=False, gt_offset_s=2.0)
        assert shifted.start == plain.start
        np.testing.assert_array_equal(shifted.video.frames, plain.video.frames)
        expected = rec._ppg.samples[plain.start + 60:plain.start + 360]
        np.testing.assert_array_equal(shifted.ppg.samples, expected)


class TestEvalWindows:
    def test_non_overlapping_cover(self):
        rec = synth_generate(small_spec(duration_s=35.0), np.random.default_rng(16))
        windows = list(iter_eval_windows(rec, 10.0))
        assert [start for start, _ in windows] == [0, 300, 600]
        assert all(clip.num_frames == 300 for _, clip in windows)

    def test_multiple_constraint(self):
        rec = synth_generate(small_spec(duration_s=11.0), np.random.default_rng(17))
        (start, clip), = iter_eval_windows(rec, 10.1, multiple=4)
        assert clip.num_frames % 4 == 0


class TestContainer:
    def test_round_trip_float(self, tmp_path):
        rec = synth_generate(small_spec(noise_std=0.03), np.random.default_rng(18))
        save_recording(tmp_path / "rec", rec)
        loaded = load_recording(tmp_path / "rec")
        assert np.array_equal(loaded.video.frames, rec.video.frames)
        np.testing.assert_allclose(loaded._ppg.samples, rec._ppg.samples, atol=1e-12)
        np.testing.assert_allclose(loaded._hr, rec._hr, atol=1e-12)
        assert loaded.fps == rec.fps

    def test_round_trip_uint8_and_boxes(self, tmp_path):
        rng = np.random.default_rng(19)
        frames = rng.integers(0, 255, (10, 8, 8, 3), dtype=np.uint8)
        boxes = rng.uniform(0, 4, (10, 4))
        rec = Recording(VideoClip(frames, FS), boxes=boxes, subject="abc")
        save_recording(tmp_path / "rec", rec)
        loaded = load_recording(tmp_path / "rec")
        assert loaded.video.frames.dtype == np.uint8
        assert np.array_equal(loaded.video.frames, frames)
        np.testing.assert_allclose(loaded.boxes, boxes, atol=1e-15)
        assert loaded.subject == "abc"
        assert loaded._ppg is None

    def test_bad_magic_names_expected(self, tmp_path):
        (tmp_path / "rec").mkdir()
        (tmp_path / "rec" / "video.rpv").write_bytes(b"XXXX" + b"\x00" * 30)
        with pytest.raises(ValueError, match="RPV1"):
            load_recording(tmp_path / "rec")

    def test_truncation_detected(self, tmp_path):
        rec = synth_generate(small_spec(duration_s=2.0), np.random.default_rng(20))
        save_recording(tmp_path / "rec", rec)
        blob = (tmp_path / "rec" / "video.rpv").read_bytes()
        (tmp_path / "rec" / "video.rpv").write_bytes(blob[:-100])
        with pytest.raises(ValueError, match="truncated"):
            load_recording(tmp_path / "rec")

    def test_missing_ppg_gives_absent_labels(self, tmp_path):
        rec = synth_generate(small_spec(duration_s=2.0), np.random.default_rng(21))
        save_recording(tmp_path / "rec", rec)
        (tmp_path / "rec" / "ppg.csv").unlink()
        loaded = load_recording(tmp_path / "rec")
        assert not loaded.has_labels

    def test_dataset_round_trip(self, tmp_path):
        recs = [synth_generate(small_spec(duration_s=2.0), np.random.default_rng(s))
                for s in (22, 23)]
        from pulselearn.data import save_dataset
        save_dataset(tmp_path / "ds", recs)
        loaded = load_dataset(tmp_path / "ds")
        assert len(loaded) == 2
        assert np.array_equal(loaded[1].video.frames, recs[1].video.frames)


class TestLabelCounter:
    def test_property_access_counts(self):
        rec = synth_generate(small_spec(duration_s=2.0), np.random.default_rng(24))
        rec.label_reads = 0
        _ = rec.ppg
        _ = rec.hr
        assert rec.label_reads == 2
        _ = rec.video
        assert rec.label_reads == 2


class TestAudit:
    def test_default_spec_meets_stability_target(self):
        recs = [synth_generate(SynthSpec(), np.random.default_rng(s)) for s in range(3)]
        report = audit_hr_stability(recs)
        q05, q50, q95 = report[10.0]
        assert q50 <= 2.5

    def test_quantiles_match_manual(self):
        hr = np.linspace(60.0, 70.0, 600)  # steady ramp
        video = VideoClip(np.zeros((600, 2, 2, 1)), FS)
        rec = Recording(video, hr=hr)
        report = audit_hr_stability([rec], deltas_s=(5.0,), quantiles=(0.5,))
        lag = int(5.0 * FS)
        expected = np.median(np.abs(hr[lag:] - hr[:-lag]))
        assert report[5.0][0] == pytest.approx(expected)

    def test_ppg_fallback(self):
        spec = small_spec(duration_s=30.0)
        rec = synth_generate(spec, np.random.default_rng(25))
        rec_no_hr = Recording(rec.video, ppg=rec._ppg)
        report = audit_hr_stability([rec_no_hr], deltas_s=(2.5,))
        assert report[2.5][1] < 2.0  # steady tone: tiny median variation

    def test_no_labels_errors(self):
        video = VideoClip(np.zeros((60, 2, 2, 1)), FS)
        with pytest.raises(ValueError, match="ground truth"):
            audit_hr_stability([Recording(video)])
