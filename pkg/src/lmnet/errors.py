"""Exception types shared across the package.

The CLI maps ConfigError and DataError to exit code 1 (bad input that the
user can fix) and every other LmnetError to exit code 2 (runtime failure).
"""


class LmnetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LmnetError, ValueError):
    """An array has the wrong rank, size, or channel count."""


class ConfigError(LmnetError, ValueError):
    """A configuration value or combination of values is invalid."""


class DataError(LmnetError, ValueError):
    """A dataset, index, or raw input directory is malformed."""


class CheckpointError(LmnetError, ValueError):
    """A checkpoint file cannot be read or does not match expectations."""


class NonFiniteGradientError(LmnetError, FloatingPointError):
    """An optimizer step was rejected because a gradient entry was not finite."""


class TrainAbortedError(LmnetError, RuntimeError):
    """Training stopped early; ``step`` records the offending optimizer step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
