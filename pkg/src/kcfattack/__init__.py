"""Distributed Kalman-consensus estimation under false-data-injection attack."""
from .errors import (CalibrationError, ConfigurationError, GainSynthesisError, GenerationError, InstabilityError,
                     KcfAttackError, NumericalError, SolverError)
from .kernels import DEFAULT_BACKEND, available_backends

__version__ = "0.1.0"
