"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so raise the narrowest class that fits.
"""


class AcFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(AcFormerError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(AcFormerError, ValueError):
    """A configuration value or budget is invalid."""


class DataError(AcFormerError, ValueError):
    """Input data violates a precondition (non-finite, out of range, bad layout)."""


class NumericError(AcFormerError, ArithmeticError):
    """A computation produced NaN or Inf."""


class UsageError(AcFormerError, RuntimeError):
    """An API was called out of order, e.g. backward without a forward cache."""
