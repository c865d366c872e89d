"""Exception hierarchy shared by all metricreg modules."""


class MetricRegError(Exception):
    """Base class for all metricreg errors."""


class InputError(MetricRegError, ValueError):
    """Invalid data handed to an operation (shape/grid mismatch, non-finite values)."""


class ConfigError(MetricRegError, ValueError):
    """Invalid configuration or command usage."""


class NumericalError(MetricRegError, ArithmeticError):
    """A numerical procedure failed (diverged, singular system, non-finite energy)."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateSampleError(MetricRegError, ValueError):
    """The training sample carries no usable metric signal (e.g. identical images)."""
