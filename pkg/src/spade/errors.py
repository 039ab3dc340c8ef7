"""Exception hierarchy shared by the package and mapped to CLI exit codes."""


class SpadeError(Exception):
    """Base class for all package errors."""


class ShapeError(SpadeError, ValueError):
    """Tensor or array shapes are incompatible."""


class GradientError(SpadeError):
    """Backward pass was requested on something that cannot be differentiated."""


class DataError(SpadeError):
    """Input data is malformed or violates a schema."""


class SchemaError(DataError):
    """A required column is missing or a value has the wrong type."""


class UndefinedMetricError(SpadeError):
    """A metric scope has an empty or zero-weight denominator."""


class CheckpointError(DataError):
    """Checkpoint file is missing, corrupt or incompatible with the config."""


class NumericError(SpadeError):
    """Training produced a non-finite loss."""


class ConfigError(SpadeError, ValueError):
    """Configuration values are out of range or inconsistent."""
