"""Exception and warning classes shared across the package."""


class AirylabError(Exception):
    """Base class; ``error_class`` is the machine-readable tag the CLI reports."""

    error_class = "error"


class InvalidInputError(AirylabError, ValueError):
    error_class = "invalid-input"


class InfeasibleGeometryError(InvalidInputError):
    error_class = "infeasible-geometry"


class ConvergenceError(AirylabError, RuntimeError):
    """Raised when an optimizer runs out of budget; carries the best value seen."""

    error_class = "convergence"

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class AccuracyError(AirylabError, RuntimeError):
    error_class = "accuracy"

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class LowAcceptanceError(AirylabError, RuntimeError):
    error_class = "low-acceptance"

    def __init__(self, message, rate=None):
        super().__init__(message)
        self.rate = rate


class NumericError(AirylabError, RuntimeError):
    error_class = "numeric"


class ConditioningWarning(UserWarning):
    pass


class ConvergenceWarning(UserWarning):
    pass


class ReliabilityWarning(UserWarning):
    pass
