"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, anything else -> 4.
"""


class IdlewatchError(Exception):
    """Base class for package errors."""


class ConfigError(IdlewatchError, ValueError):
    """Invalid configuration value or inconsistent parameters."""


class GeometryError(IdlewatchError, ValueError):
    """Degenerate geometry, e.g. projecting a point at the horizon."""


class DataError(IdlewatchError, RuntimeError):
    """Missing, malformed, or mutually inconsistent data artifacts."""


class StreamError(DataError):
    """Ill-formed input stream (clock regression, duplicate frames)."""


class TrainingDivergedError(IdlewatchError, RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, step: int, batch_indices, message: str = ""):
        self.step = step
        self.batch_indices = list(batch_indices)
        super().__init__(
            message or f"non-finite loss at step {step}, batch {self.batch_indices}"
        )
