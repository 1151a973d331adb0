"""Contrastive and supervised remote-photoplethysmography training pipelines,
verified end to end on synthetic video with known embedded pulse signals."""

from .data import (
    Recording,
    SampledClip,
    SynthSpec,
    audit_hr_stability,
    load_dataset,
    load_recording,
    sample_clip,
    save_dataset,
    save_recording,
    sticky_crop,
    synth_generate,
)
from .estimators import RemotePulseEstimator
from .evaluate import DesyncSpec, HrEvalResult, desync_bench, eval_hr, interpretability_bench
from .graph import Graph, GraphError, grad_check
from .losses import LossValue, MvtlConfig, ipr, mcc, mvtl, pearson, psd_mse, snr
from .models import EstimatorConfig, PulseModel, build, load_model, predict_ppg, save_model
from .resample import draw_ratio, resample_signal, resample_video
from .saliency import SaliencyMap, build_saliency_net, compute_map, saliency_loss, warp
from .spectral import BPM_BAND, NoInBandSignal, PpgSignal, Psd, band_mask, estimate_hr, psd
from .training import AdamW, TrainConfig, TrainResult, optimizer_step, select_model, train
from .video import VideoClip

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "BPM_BAND",
    "DesyncSpec",
    "EstimatorConfig",
    "Graph",
    "GraphError",
    "HrEvalResult",
    "LossValue",
    "MvtlConfig",
    "NoInBandSignal",
    "PpgSignal",
    "Psd",
    "PulseModel",
    "Recording",
    "RemotePulseEstimator",
    "SaliencyMap",
    "SampledClip",
    "SynthSpec",
    "TrainConfig",
    "TrainResult",
    "VideoClip",
    "audit_hr_stability",
    "band_mask",
    "build",
    "build_saliency_net",
    "compute_map",
    "desync_bench",
    "draw_ratio",
    "estimate_hr",
    "eval_hr",
    "grad_check",
    "interpretability_bench",
    "ipr",
    "load_dataset",
    "load_model",
    "load_recording",
    "mcc",
    "mvtl",
    "pearson",
    "predict_ppg",
    "psd",
    "psd_mse",
    "resample_signal",
    "resample_video",
    "saliency_loss",
    "sample_clip",
    "save_dataset",
    "save_model",
    "save_recording",
    "select_model",
    "snr",
    "sticky_crop",
    "synth_generate",
    "train",
    "warp",
]
