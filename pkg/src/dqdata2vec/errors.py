"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class DQError(Exception):
    """Base class for all package errors."""


class ConfigError(DQError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(DQError, ValueError):
    """Malformed corpus, batch or label data."""


class RegimeError(DQError):
    """Labels required by the active training regime are missing."""


class CollapseError(DQError):
    """Codebook usage collapsed during pretraining."""

    def __init__(self, message, step=None, kind="collapse"):
        super().__init__(message)
        self.step = step
        self.kind = kind


class LossExplosionError(CollapseError):
    """Loss became non-finite or exceeded the configured ceiling."""

    def __init__(self, message, step=None):
        super().__init__(message, step=step, kind="loss explosion")


class CheckpointError(DQError):
    """Checkpoint could not be read or does not match this version."""
