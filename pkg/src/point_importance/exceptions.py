"""Exception hierarchy shared by the library and the command line."""


class PointError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PointError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(PointError, ValueError):
    """Invalid hyperparameter or configuration combination."""


class DataError(PointError, ValueError):
    """Scene or corpus content violates its contract."""


class CorpusParseError(DataError):
    """A corpus line could not be parsed."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class NonFiniteError(PointError, ArithmeticError):
    """An operation produced NaN or Inf."""


class UsageError(PointError):
    """Operation called outside its contract (e.g. backward on a non-scalar)."""


class DivergenceError(PointError, RuntimeError):
    """Training loss became non-finite."""
