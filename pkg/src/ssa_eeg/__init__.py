"""Singular spectrum analysis of multichannel EEG with a CNN ensemble classifier."""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config
from .ensemble import EnsembleModel, EvalReport, cross_validate, sweep_groups, train_ensemble, vote
from .nn import CnnModel, default_model, predict, train
from .signal import BandPassSpec, Recording, bandpass, load_recording, normalize_channels, segment
from .spectral import FeatureDataset, build_features, channel_correlation, welch_psd
from .ssa import (
    ComponentGrouping,
    SsaConfig,
    SsaDecomposition,
    group_components,
    merge_groups,
    ssa_decompose,
    variance_explained,
    w_correlation,
)
from .synth import SynthSpec, generate, preset

__all__ = [
    "BandPassSpec", "CnnModel", "ComponentGrouping", "EnsembleModel", "EvalReport",
    "FeatureDataset", "PipelineConfig", "Recording", "SsaConfig", "SsaDecomposition",
    "SynthSpec", "bandpass", "build_features", "channel_correlation", "cross_validate",
    "default_model", "generate", "group_components", "load_config", "load_recording",
    "merge_groups", "normalize_channels", "predict", "preset", "segment", "ssa_decompose",
    "sweep_groups", "train", "train_ensemble", "variance_explained", "vote",
    "w_correlation", "welch_psd",
]
