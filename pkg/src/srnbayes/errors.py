"""Exception types raised across the package."""


class SrnError(Exception):
    """Base class for package errors."""


class IntegrationDiverged(SrnError):
    """An ODE or SDE integration produced a non-finite or exploding state."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class NotPositiveSemidefinite(SrnError):
    """Cholesky failed even after the jitter ladder was exhausted."""


class StateDomainError(SrnError):
    """A state fell outside the admissible domain beyond tolerance."""


class DomainError(SrnError):
    """A parameter value fell outside its transform's domain."""


class InfeasibleThreshold(SrnError):
    """An ABC threshold could not be met within the simulation budget."""


class DegeneracyError(SrnError):
    """ABC-SMC particle weights collapsed."""


class ConfigError(SrnError):
    """An experiment configuration is invalid."""
