"""Exception types shared across the package."""


class FlexDistillError(Exception):
    pass


class DimensionError(FlexDistillError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(FlexDistillError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ParameterError(FlexDistillError, ValueError):
    """An argument has an invalid value (negative stddev, tau <= 0, ...)."""


class ValidationError(FlexDistillError, ValueError):
    """Data does not satisfy its invariants (labels out of range, non one-hot, ...)."""


class ConfigError(FlexDistillError, ValueError):
    pass


class FormatError(FlexDistillError, ValueError):
    """A file is malformed. ``offset`` is the byte offset or line number when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(FlexDistillError, RuntimeError):
    """API called out of order, e.g. backward with a stale context."""


class NumericError(FlexDistillError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""
