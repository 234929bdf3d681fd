"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage/config/data problems
exit with 2, numeric failures with 3.
"""


class GenAggError(Exception):
    """Base class for all package errors."""


class ShapeError(GenAggError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(GenAggError, ArithmeticError):
    """A forward or backward computation produced NaN or Inf."""


class DoubleBackwardError(GenAggError, RuntimeError):
    """backward() was called twice on the same graph."""


class BatchTooSmallError(GenAggError, ValueError):
    """Batch normalization in training mode needs at least two rows."""


class DomainError(GenAggError, ValueError):
    """An input lies outside the domain of an operation."""


class ParameterError(GenAggError, ValueError):
    """An aggregation parameter has an invalid value."""


class ParseError(GenAggError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ValidationError(GenAggError, ValueError):
    """Parsed data violates a structural invariant."""


class ConfigError(GenAggError, ValueError):
    """A configuration value is missing or invalid."""


class CheckpointError(GenAggError, ValueError):
    """A checkpoint file is unreadable or inconsistent."""
