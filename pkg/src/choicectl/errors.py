"""Exception hierarchy shared by every module of the package."""


class ChoiceCtlError(Exception):
    """Base class for all package errors."""


class DimensionError(ChoiceCtlError, ValueError):
    """Array shapes do not agree."""


class DomainError(ChoiceCtlError, ValueError):
    """An argument lies outside the domain of the operation (e.g. a time outside the horizon)."""


class ConfigurationError(ChoiceCtlError, ValueError):
    """A scenario or controller is missing a required setting."""


class NumericError(ChoiceCtlError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class SingularityError(NumericError):
    """A matrix is singular to working tolerance.

    ``condition`` carries the condition-number estimate when one is available.
    """

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class HorizonGuardError(SingularityError):
    """A feedback gain was requested too close to the terminal time."""


class ControllabilityError(ChoiceCtlError, ValueError):
    """An agent cannot steer the system on its own over the horizon."""

    def __init__(self, message, agent=None, condition=None):
        super().__init__(message)
        self.agent = agent
        self.condition = condition


class CompatibilityError(ChoiceCtlError, ValueError):
    """The target tensor violates the difference constraints and cannot be realized exactly."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConsistencyError(ChoiceCtlError, ValueError):
    """A constraint system has unexpected rank or an inconsistent right-hand side."""
