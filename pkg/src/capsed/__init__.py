"""Capsule neural networks with dynamic routing for polyphonic sound event detection."""

from .capsnet import CapsNet, ModelConfig, build_model, preset
from .errors import CapsedError, ConfigError, DataError, NumericError, ShapeError
from .features import FeatureConfig, NormStats
from .metrics import Event, EventRoll, event_error_rate_onset, segment_error_rate
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "CapsNet", "ModelConfig", "build_model", "preset",
    "CapsedError", "ConfigError", "DataError", "NumericError", "ShapeError",
    "FeatureConfig", "NormStats",
    "Event", "EventRoll", "event_error_rate_onset", "segment_error_rate",
    "Tensor", "backward", "no_grad",
]
