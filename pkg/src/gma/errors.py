class GMAError(Exception):
    """Base class for package errors."""


class ShapeError(GMAError, ValueError):
    """Operand dimensions are incompatible."""


class ContractError(GMAError, ValueError):
    """A documented precondition was violated."""


class NumericError(GMAError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(GMAError, ValueError):
    """Invalid run configuration."""


class FormatError(GMAError, IOError):
    """Malformed tensor or checkpoint file."""
