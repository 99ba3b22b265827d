"""Exception hierarchy shared by every module of the package."""


class KcfAttackError(Exception):
    """Base class for all package errors."""


class ConfigurationError(KcfAttackError, ValueError):
    """Inconsistent dimensions, invalid parameters or violated preconditions."""


class NumericalError(KcfAttackError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""

    def __init__(self, message, condition_number=None):
        if condition_number is not None:
            message = f"{message} (condition number {condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number


class GainSynthesisError(KcfAttackError):
    """Consensus gains could not be chosen so that the closed loop is stable."""


class CalibrationError(KcfAttackError):
    """Detector covariance calibration failed."""


class InstabilityError(KcfAttackError):
    """A simulated trajectory diverged."""


class SolverError(KcfAttackError):
    """A stationarity system could not be solved."""

    def __init__(self, message, node=None):
        if node is not None:
            message = f"node {node}: {message}"
        super().__init__(message)
        self.node = node


class GenerationError(KcfAttackError):
    """No admissible random instance was found."""
