"""Exception hierarchy shared across the package."""


class SammpError(Exception):
    """Base class for all package errors."""


class DimensionError(SammpError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SammpError, ArithmeticError):
    """A computation produced NaN/Inf or hit a singular matrix."""


class UsageError(SammpError, RuntimeError):
    """An API was called in a way its contract forbids."""


class DomainError(SammpError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ParseError(SammpError, ValueError):
    """Malformed input file."""


class DataError(SammpError, ValueError):
    """Input data violates a semantic constraint."""


class ConfigError(SammpError, ValueError):
    """Invalid or infeasible configuration."""


class TrainingError(SammpError, RuntimeError):
    """Training aborted."""
