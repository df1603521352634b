"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data errors
exit 3, numerical/convergence errors exit 4.
"""


class EffectBridgeError(Exception):
    """Base class for all package errors."""


class ConfigError(EffectBridgeError):
    """Invalid schema, run configuration, or argument combination."""


class ProtocolError(ConfigError):
    """Sample-splitting protocol violated (e.g. gram fold overlaps estimation fold)."""


class DataError(EffectBridgeError):
    """Input data violates a precondition (bad rows, empty arms, no target records)."""


class NumericalError(EffectBridgeError):
    """Numerical failure (singular system, invalid floating-point result)."""


class ConvergenceError(NumericalError):
    """Iterative fit failed to converge; carries the last iterate."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate
