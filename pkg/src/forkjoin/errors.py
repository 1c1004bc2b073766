"""Exception types shared across the package."""

from __future__ import annotations


class ForkJoinError(Exception):
    """Base class for all package errors."""


class DomainError(ForkJoinError, ValueError):
    """A formula was evaluated outside the region where it is defined."""


class ConfigurationError(ForkJoinError, ValueError):
    """Parameters or a policy partition are inconsistent."""


class InfeasibleError(ForkJoinError, ValueError):
    """The replication-profile problem has no feasible point at these parameters."""


class NumericalError(ForkJoinError, RuntimeError):
    """A numerical routine failed to reach its tolerance."""

    def __init__(self, message: str, achieved: float | None = None) -> None:
        super().__init__(message)
        self.achieved = achieved


class RmaxTooSmall(NumericalError):
    """The replica-count minimizer sits on the search cap, so the cap may be binding."""


class ContractViolation(ForkJoinError, RuntimeError):
    """A policy asked the engine to do something outside its contract."""


class InsufficientData(ForkJoinError, ValueError):
    """Too few observations to form a statistic."""

    def __init__(self, message: str, count: int) -> None:
        super().__init__(message)
        self.count = count
