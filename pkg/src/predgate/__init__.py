"""Gated convolutional LSTM zoo inside a predictive-coding video-prediction stack."""

from .cell_zoo import MODEL_IDS, model_spec
from .errors import ConfigError, FormatError, PredgateError, TrainingError, UsageError
from .predcode_stack import StackConfig, build_stack, load_checkpoint, rollout, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "MODEL_IDS", "model_spec", "StackConfig", "build_stack", "rollout", "save_checkpoint",
    "load_checkpoint", "PredgateError", "ConfigError", "UsageError", "TrainingError", "FormatError",
]
