"""Exception types shared across the package."""


class BespokeError(Exception):
    """Base class for all errors raised by this package."""


class OutOfDomainError(BespokeError, ValueError):
    """A query value lies outside the valid domain of an operation."""


class SingularTimeError(BespokeError, ZeroDivisionError):
    """A velocity field was evaluated at a time where it is undefined."""


class UnsupportedFieldError(BespokeError, ValueError):
    """An oracle was asked about a field configuration it does not cover."""


class DivergenceError(BespokeError, ArithmeticError):
    """A rollout state exceeded the divergence guard.

    Carries the step index at which the blow-up was detected.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StepUnderflowError(BespokeError, ArithmeticError):
    """The adaptive controller demanded a step below the minimum size."""


class MaxStepsExceededError(BespokeError, ArithmeticError):
    """The adaptive solver hit its step budget before reaching the end time."""


class DegenerateGridError(BespokeError, ValueError):
    """Scheme parameters produced an invalid discretization grid."""


class SchemeFormatError(BespokeError, ValueError):
    """A scheme file could not be parsed or has an unsupported version."""


class ProbeFailureError(BespokeError, ArithmeticError):
    """A gradient probe produced a non-finite loss.

    Carries the index of the parameter coordinate being probed.
    """

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class NumericalAbortError(BespokeError, ArithmeticError):
    """Training was aborted after repeated invalid update proposals."""


class ConfigError(BespokeError, ValueError):
    """A run configuration is missing, malformed, or inconsistent."""
