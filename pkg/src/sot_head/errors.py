"""Exception hierarchy shared by every module."""


class SotError(Exception):
    """Base class for library errors."""


class ShapeError(SotError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(SotError, ValueError):
    """Input lies outside the operation's mathematical domain."""


class NumericError(SotError, ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class DegenerateDirectionError(NumericError):
    """Power iteration collapsed: the start vector has no component in the row space."""


class NearSingularError(NumericError):
    """A singular value used as a divisor is below the guard threshold."""


class ConfigurationError(SotError, ValueError):
    """Parameters do not match the requested configuration."""


class ContractError(SotError, RuntimeError):
    """A backward pass received a cache that does not match its forward call."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
