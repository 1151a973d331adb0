"""Scikit-learn facade tests: params round trip, cloning, fit/predict/score."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pulselearn.data import SynthSpec, synth_generate
from pulselearn.estimators import RemotePulseEstimator, check_clips, check_recordings
from pulselearn.video import VideoClip

FS = 30.0


def make_recordings(n=4, seed=0, hr_range=(70.0, 110.0)):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(n):
        spec = SynthSpec(duration_s=20.0, fps=FS, height=8, width=8, channels=1,
                         region=(2, 2, 4, 4), base_hr=float(rng.uniform(*hr_range)),
                         drift_bpm_s=0.0, amplitude=0.05, noise_std=0.01)
        recs.append(synth_generate(spec, rng))
    return recs


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = RemotePulseEstimator(mode="supervised", epochs=3, lr=0.01)
        params = est.get_params()
        assert params["mode"] == "supervised"
        assert params["epochs"] == 3
        est.set_params(epochs=5)
        assert est.get_params()["epochs"] == 5

    def test_clone(self):
        est = RemotePulseEstimator(epochs=2, seed=11)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_predict_before_fit_raises(self):
        est = RemotePulseEstimator()
        clip = VideoClip(np.zeros((8, 8, 8, 1)) + 0.5, FS)
        with pytest.raises(NotFittedError):
            est.predict([clip])


class TestValidation:
    def test_check_recordings_rejects_wrong_type(self):
        with pytest.raises(TypeError, match="Recording"):
            check_recordings([1, 2])

    def test_check_recordings_rejects_mixed_shapes(self):
        a = make_recordings(1, seed=1)[0]
        rng = np.random.default_rng(2)
        spec = SynthSpec(duration_s=5.0, fps=FS, height=16, width=16, channels=1,
                         region=(4, 4, 4, 4), drift_bpm_s=0.0)
        b = synth_generate(spec, rng)
        with pytest.raises(ValueError, match="disagree"):
            check_recordings([a, b])

    def test_check_clips_accepts_recordings(self):
        recs = make_recordings(2, seed=3)
        clips = check_clips(recs)
        assert all(isinstance(c, VideoClip) for c in clips)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            check_recordings([])


class TestFitPredict:
    def test_contrastive_fit_predict_score(self):
        recs = make_recordings(4, seed=4)
        est = RemotePulseEstimator(mode="contrastive", epochs=8, batch_size=2,
                                   lr=0.05, num_views=2, view_len_s=5.0, seed=0)
        est.fit(recs)
        hrs = est.predict(recs)
        assert hrs.shape == (4,)
        assert np.all((40.0 <= hrs) & (hrs <= 250.0))
        assert np.isfinite(est.score(recs))
        assert est.best_epoch_ < 8
        assert len(est.history_) == 8

    def test_supervised_fit_improves_over_init(self):
        recs = make_recordings(4, seed=5)
        est = RemotePulseEstimator(mode="supervised", epochs=10, batch_size=2,
                                   lr=0.05, seed=0)
        est.fit(recs)
        gt = np.array([float(np.mean(r._hr)) for r in recs])
        pred = est.predict(recs)
        assert np.mean(np.abs(pred - gt)) < 10.0

    def test_predict_signal_matches_clip_length(self):
        recs = make_recordings(2, seed=6)
        est = RemotePulseEstimator(epochs=2, batch_size=2, num_views=2,
                                   view_len_s=5.0, seed=1)
        est.fit(recs)
        sig = est.predict_signal(recs[0].video)
        assert len(sig) == recs[0].video.num_frames

    def test_explicit_validation_list(self):
        recs = make_recordings(4, seed=7)
        est = RemotePulseEstimator(mode="supervised", epochs=2, batch_size=2, seed=2)
        est.fit(recs[:3], validation=recs[3:])
        assert hasattr(est, "model_")
