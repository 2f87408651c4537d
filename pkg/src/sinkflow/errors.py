"""Exception hierarchy shared by all sinkflow modules."""


class SinkflowError(Exception):
    """Base class for every error raised by sinkflow."""


class SchemaError(SinkflowError, ValueError):
    """Shapes, dimensions or column layouts do not line up."""


class NumericError(SinkflowError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ValidationError(SinkflowError, ValueError):
    """Inputs violate a documented precondition."""


class CapabilityError(SinkflowError, ValueError):
    """Request exceeds what an exact/brute-force routine can handle."""


class IngestionError(SinkflowError, ValueError):
    """Malformed CSV input. ``row`` is the 1-based line number when known."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"line {row}: {message}")
        self.row = row


class ModelFormatError(SinkflowError, ValueError):
    """Serialized model or plan has the wrong magic or version."""


class ApproximateResultWarning(UserWarning):
    """A Sinkhorn solve hit its iteration cap; the result is approximate."""


class ConfigError(SinkflowError, ValueError):
    """Run configuration is malformed or refers to missing inputs."""
