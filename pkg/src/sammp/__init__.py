"""Self-attention multimodal multi-agent trajectory forecasting on numpy."""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    DomainError,
    NumericError,
    ParseError,
    SammpError,
    TrainingError,
    UsageError,
)
from .forecast import MixtureForecast
from .model import ModelConfig, forward, init_params, load_checkpoint, predict, save_checkpoint
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "DomainError",
    "MixtureForecast",
    "ModelConfig",
    "NumericError",
    "ParseError",
    "SammpError",
    "TrainConfig",
    "TrainingError",
    "UsageError",
    "evaluate",
    "forward",
    "init_params",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "train",
]
