"""Exception types shared across the package."""


class DrnetError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DrnetError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(DrnetError, ValueError):
    """Array or tensor dimensions incompatible with an operation."""


class ValidationError(DrnetError, ValueError):
    """Input values violate a documented precondition (e.g. non-binary mask)."""


class DataError(DrnetError, RuntimeError):
    """Dataset ingestion failure: missing, mismatched, or unreadable files."""


class NumericError(DrnetError, RuntimeError):
    """Non-finite values encountered, or an internal numeric cross-check failed."""


class UndefinedMetricError(DrnetError, ZeroDivisionError):
    """A metric denominator is zero; the value is mathematically undefined."""


class CheckpointError(DrnetError, RuntimeError):
    """Checkpoint file is malformed or incompatible with the target model."""


class TrainingDivergedError(NumericError):
    """The training loss became non-finite."""
