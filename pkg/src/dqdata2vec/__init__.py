"""Teacher-student speech representation learning with decoupled
language-level and phoneme-level quantizers, on a synthetic multilingual corpus."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    CollapseError,
    ConfigError,
    DataError,
    DQError,
    LossExplosionError,
    RegimeError,
)

__all__ = [
    "CheckpointError",
    "CollapseError",
    "ConfigError",
    "DataError",
    "DQError",
    "LossExplosionError",
    "RegimeError",
    "__version__",
]
