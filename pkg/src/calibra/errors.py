"""Exception types shared across the package."""


class CalibraError(Exception):
    """Base class for package errors."""


class ConfigurationError(CalibraError, ValueError):
    """Invalid shapes, sizes or hyperparameters."""


class UsageError(CalibraError, ValueError):
    """An API was called outside its contract."""


class DegenerateInputError(CalibraError, ValueError):
    """Input carries no information (for example an all-zero map triple)."""


class FormatError(CalibraError, ValueError):
    """A file could not be parsed."""


class NumericalError(CalibraError, ArithmeticError):
    """A NaN or Inf appeared during training."""
