"""Cascaded Schroedinger-bridge audio/visual forgery localizer."""

from .config import EvalConfig, ModelConfig, RunConfig, TrainConfig
from .intervals import EventCandidate, MetricReport
from .losses import LossConfig
from .model import Localizer
from .numerics import ParamStore, Tensor
from .synth import ClipRecord, SynthConfig

__version__ = "0.1.0"

__all__ = [
    "ClipRecord", "EvalConfig", "EventCandidate", "Localizer", "LossConfig",
    "MetricReport", "ModelConfig", "ParamStore", "RunConfig", "SynthConfig",
    "Tensor", "TrainConfig", "__version__",
]
