"""Exception types raised by the simulator."""

from typing import Any


class GossipPGAError(Exception):
    """Base class for all simulator errors."""


class InvalidTopologyError(GossipPGAError, ValueError):
    """A topology cannot be built with the requested parameters."""


class UnsupportedTopologyError(GossipPGAError, ValueError):
    """The operation is not defined for this kind of topology."""


class InvalidPeriodError(GossipPGAError, ValueError):
    """An averaging period H below 1 was requested."""


class DomainError(GossipPGAError, ValueError):
    """A numeric argument lies outside the domain of a formula."""


class PreconditionError(GossipPGAError, ValueError):
    """A step-size or parameter precondition of a bound is violated."""


class GridMismatchError(GossipPGAError, ValueError):
    """Trajectories compared or aggregated do not share a logging grid."""


class UnsupportedScheduleError(GossipPGAError, ValueError):
    """The operation requires a different step-size schedule."""


class MissingReferenceError(GossipPGAError, ValueError):
    """Transient detection was requested without a reference run."""


class InfiniteTransientError(GossipPGAError, ArithmeticError):
    """The predicted transient stage is unbounded (beta = 1 for gossip)."""


class NotConvergedError(GossipPGAError, RuntimeError):
    """The reference solver exhausted its iteration budget."""

    def __init__(self, message: str, best_iterate: Any, grad_norm: float):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.grad_norm = grad_norm


class DivergenceError(GossipPGAError, RuntimeError):
    """Parameters became non-finite during a run."""

    def __init__(self, iteration: int, trajectory: Any = None):
        super().__init__(f"Non-finite parameters at iteration {iteration}")
        self.iteration = iteration
        self.trajectory = trajectory
