class OtflowError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(OtflowError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ParameterError(OtflowError, ValueError):
    pass


class StructuralError(OtflowError, ValueError):
    pass


class DomainError(OtflowError, ValueError):
    pass


class MeasureError(OtflowError, ValueError):
    pass


class ScaleGuardError(OtflowError, ValueError):
    pass


class NumericalError(OtflowError, ArithmeticError):
    """Carries the iteration history recorded before the failure, if any."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
