"""Exception types shared across the package."""


class DpflowError(Exception):
    """Base class for all package-specific errors."""


class NonFiniteInputError(DpflowError, ValueError):
    """An input array contained NaN or infinity."""


class ConfigurationError(DpflowError, ValueError):
    """A parameter value violates a documented constraint."""


class NumericalOverflowError(DpflowError, ArithmeticError):
    """A transform produced a non-finite intermediate value."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class TrainingInstabilityError(DpflowError, ArithmeticError):
    """Gradient computation produced non-finite entries."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index
