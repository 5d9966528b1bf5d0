"""Exception types shared across the package."""


class OriconvError(Exception):
    """Base class for all package errors."""


class ShapeError(OriconvError, ValueError):
    """Raised when array shapes are inconsistent with an operation's contract."""


class NumericalError(OriconvError, ArithmeticError):
    """Raised when a computation produces non-finite values."""


class ConfigError(OriconvError, ValueError):
    """Raised for invalid network or training configuration."""
