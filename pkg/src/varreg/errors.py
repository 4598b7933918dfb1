"""Exception hierarchy shared by every module."""


class VarRegError(Exception):
    """Base class for all errors raised by varreg."""


class GridMismatchError(VarRegError, ValueError):
    """Two fields that must share a grid do not."""


class ConfigError(VarRegError, ValueError):
    """An invalid parameter, configuration or precondition."""


class FormatError(VarRegError, ValueError):
    """A file could not be parsed or failed validation."""


class NumericalError(VarRegError, ArithmeticError):
    """A non-finite value was produced or detected."""
