"""Scikit-learn style front end.

`RemotePulseEstimator` wraps the training loops behind the familiar
``fit`` / ``predict`` / ``get_params`` surface so the pipeline composes with
the wider ecosystem (cloning, grid search over hyperparameters, etc.).
``X`` is a list of :class:`~pulselearn.data.Recording`; labels live inside
the recordings, so ``y`` is always ignored.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Recording
from .evaluate import eval_hr
from .models import EstimatorConfig
from .spectral import PpgSignal, estimate_hr
from .training import TrainConfig, train
from .video import VideoClip


def check_recordings(X) -> list[Recording]:
    """Validate an input collection of recordings."""
    if isinstance(X, Recording):
        X = [X]
    recordings = list(X)
    if not recordings:
        raise ValueError("need at least one recording")
    for i, rec in enumerate(recordings):
        if not isinstance(rec, Recording):
            raise TypeError(f"X[{i}] is {type(rec).__name__}, expected Recording")
    shapes = {rec.video.frames.shape[1:] for rec in recordings}
    if len(shapes) > 1:
        raise ValueError(f"recordings disagree on frame shape: {sorted(shapes)}")
    return recordings


def check_clips(X) -> list[VideoClip]:
    if isinstance(X, (VideoClip, Recording)):
        X = [X]
    clips = []
    for item in X:
        if isinstance(item, Recording):
            clips.append(item.video)
        elif isinstance(item, VideoClip):
            clips.append(item)
        else:
            raise TypeError(f"expected VideoClip or Recording, got {type(item).__name__}")
    if not clips:
        raise ValueError("need at least one clip")
    return clips


class RemotePulseEstimator(BaseEstimator):
    """Heart-rate estimator trained from video, with or without labels.

    Parameters
    ----------
    mode : {"contrastive", "supervised"}
        Contrastive training never reads ground truth; supervised training
        needs per-frame reference pulse signals in the recordings.
    variant : {"spatial_pool", "physnet_mini"}
        Model architecture.
    channels, blocks : int
        Capacity of the physnet_mini variant (ignored by spatial_pool).
    loss : {"mcc", "pearson", "snr"}
        Supervised training metric.
    epochs, batch_size, lr, weight_decay : training hyperparameters.
    window_s, num_views, view_len_s : sampling window and triplet views.
    saliency : bool
        Prepend the trainable saliency warp.
    augment : bool
        Random stretch augmentation while sampling training windows.
    val_fraction : float
        Recordings held out of `fit(X)` for supervised model selection
        (contrastive mode folds them back into training, label-free).
    seed : int
        Seed for every random choice in the run.
    """

    def __init__(self, mode="contrastive", variant="spatial_pool", channels=8,
                 blocks=2, loss="mcc", epochs=100, batch_size=4, lr=1e-5,
                 weight_decay=0.01, window_s=10.0, num_views=4, view_len_s=5.0,
                 saliency=False, sparsity_weight=1.0, temporal_weight=1.0,
                 augment=True, val_fraction=0.2, seed=0):
        self.mode = mode
        self.variant = variant
        self.channels = channels
        self.blocks = blocks
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.window_s = window_s
        self.num_views = num_views
        self.view_len_s = view_len_s
        self.saliency = saliency
        self.sparsity_weight = sparsity_weight
        self.temporal_weight = temporal_weight
        self.augment = augment
        self.val_fraction = val_fraction
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(mode=self.mode, loss=self.loss, batch=self.batch_size,
                           epochs=self.epochs, lr=self.lr,
                           weight_decay=self.weight_decay, window_s=self.window_s,
                           num_views=self.num_views, view_len_s=self.view_len_s,
                           saliency=self.saliency,
                           sparsity_weight=self.sparsity_weight,
                           temporal_weight=self.temporal_weight,
                           augment=self.augment, seed=self.seed)

    def _model_config(self, recordings) -> EstimatorConfig:
        t, h, w, c = recordings[0].video.frames.shape
        return EstimatorConfig(variant=self.variant, channels=self.channels,
                               blocks=self.blocks, in_channels=c, height=h, width=w)

    def fit(self, X, y=None, validation=None):
        """Train on a list of recordings; returns self.

        ``validation`` optionally passes an explicit held-out list;
        otherwise the trailing ``val_fraction`` of ``X`` is held out.
        """
        recordings = check_recordings(X)
        if validation is not None:
            val = check_recordings(validation)
            train_set = recordings
        else:
            n_val = int(round(len(recordings) * self.val_fraction))
            n_val = min(max(n_val, 1 if len(recordings) > 1 else 0), len(recordings) - 1)
            split = len(recordings) - n_val
            train_set, val = recordings[:split], recordings[split:]
        result = train(train_set, val, self._model_config(recordings),
                       self._train_config())
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit must be called first")

    def predict_signal(self, clip) -> PpgSignal:
        """Pulse waveform for a single clip."""
        self._check_fitted()
        (clip,) = check_clips([clip])
        return self.model_.predict(clip)

    def predict(self, X) -> np.ndarray:
        """Heart rate in bpm for each clip (or recording) in X."""
        self._check_fitted()
        return np.array([estimate_hr(self.model_.predict(clip))
                         for clip in check_clips(X)])

    def score(self, X, y=None) -> float:
        """Negative mean absolute window-HR error (higher is better)."""
        self._check_fitted()
        result = eval_hr(self.model_, check_recordings(X), self.window_s)
        return -result.mae
