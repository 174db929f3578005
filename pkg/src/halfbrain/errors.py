"""Exception hierarchy shared by every module.

Each class carries a ``category`` string used by the command line to print a
one-word error class before the message.
"""


class HalfBrainError(Exception):
    category = "error"


class ConfigError(HalfBrainError, ValueError):
    category = "config"


class DimensionError(HalfBrainError, ValueError):
    category = "dimension"


class NumericError(HalfBrainError, ArithmeticError):
    category = "numeric"


class SaturationError(NumericError):
    category = "saturation"


class StateError(HalfBrainError, RuntimeError):
    category = "state"


class DependencyError(HalfBrainError):
    category = "dependency"


class UndefinedError(HalfBrainError, ValueError):
    category = "undefined"


class ConvergenceWarning(UserWarning):
    """Raised through :mod:`warnings` when an iterative search stops early."""

    def __init__(self, message, best_p=None):
        super().__init__(message)
        self.best_p = best_p
