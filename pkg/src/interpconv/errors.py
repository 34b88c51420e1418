"""Exception types shared across the package."""


class InterpConvError(Exception):
    """Base class for all package errors."""


class ParameterError(InterpConvError, ValueError):
    """A scalar or grid parameter is out of its documented range."""


class ShapeError(InterpConvError, ValueError):
    """Two arrays that must agree in shape do not."""


class StateError(InterpConvError, RuntimeError):
    """An operation was called before its per-filter state was ready."""


class InputError(InterpConvError, ValueError):
    """An input collection is empty or otherwise unusable."""


class ConfigError(InterpConvError, ValueError):
    """A run configuration file or override is invalid."""


class DataError(InterpConvError, ValueError):
    """A dataset on disk is missing, truncated, or inconsistent."""


class NumericalError(InterpConvError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""
