"""Exception types shared across the package."""


class DTNError(Exception):
    pass


class DimensionError(DTNError, ValueError):
    pass


class DomainError(DTNError, ValueError):
    pass


class UsageError(DTNError, ValueError):
    pass


class FormatError(DTNError):
    pass


class ConvergenceError(DTNError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonFiniteError(DTNError, ArithmeticError):
    pass


class UndefinedMetricError(DTNError, ValueError):
    pass
