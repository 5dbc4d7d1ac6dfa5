"""Exception hierarchy shared by all edgecap modules."""


class EdgecapError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(EdgecapError, ValueError):
    """A geometry or scene parameter is out of range."""


class DomainError(EdgecapError, ValueError):
    """An analytic formula was evaluated outside its domain."""


class SolverError(EdgecapError, RuntimeError):
    """The boundary-element solve failed (singular system, no convergence, size cap)."""

    def __init__(self, message, condition=None, residual=None):
        super().__init__(message)
        self.condition = condition
        self.residual = residual


class FitConvergenceError(EdgecapError, RuntimeError):
    """Least-squares iteration failed to converge.

    ``partial`` carries the last accepted parameter state (a ``FitResult``).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(EdgecapError, ValueError):
    """Configuration file could not be parsed or validated."""
