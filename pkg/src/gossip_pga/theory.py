"""Closed-form step sizes, convergence bounds, transient stages and
communication-time models for Gossip, Local and Gossip-PGA SGD."""

import logging
import math
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np

from .errors import DomainError, InfiniteTransientError, PreconditionError
from .models import AlgorithmFamily, CommModel, TopologyModel
from .problem import Heterogeneity, ProblemConstants
from .topology import MixingConstants, mixing_constants

logger = logging.getLogger(__name__)


class CommMethod(StrEnum):
    ALLREDUCE = "allreduce"
    GOSSIP = "gossip"
    PGA_AMORTIZED = "pga_amortized"
    LOCAL_AMORTIZED = "local_amortized"


@dataclass(frozen=True)
class BoundInputs:
    """Inputs shared by the step-size rule and the bounds.

    ``r0`` is 2 E|x0 - x*|^2 for the convex bound and 4 E f(x0) for the
    non-convex one. ``H`` may be ``math.inf``.
    """

    n: int
    T: int
    H: float
    beta: float
    L: float
    sigma2: float
    b2: float
    b_hat2: float
    r0: float
    gamma: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise DomainError(f"beta must lie in [0, 1), got {self.beta}")
        if self.H < 1:
            raise DomainError(f"H must be >= 1, got {self.H}")
        for name in ("L", "sigma2", "b2", "b_hat2", "r0"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")

    @property
    def mixing(self) -> MixingConstants:
        return mixing_constants(self.beta, self.H)

    @classmethod
    def from_constants(
        cls,
        constants: ProblemConstants,
        *,
        n: int,
        T: int,
        H: float,
        beta: float,
        r0: float,
        batch_size: int = 1,
        gamma: float | None = None,
    ) -> "BoundInputs":
        """Build inputs from estimated constants; mini-batching divides sigma^2."""
        return cls(
            n=n,
            T=T,
            H=H,
            beta=beta,
            L=constants.L,
            sigma2=constants.sigma2 / batch_size,
            b2=constants.b2,
            b_hat2=constants.b_hat2,
            r0=r0,
            gamma=gamma,
        )


def _r1(inputs: BoundInputs) -> float:
    return 2.0 * inputs.sigma2 / inputs.n


def _r2(inputs: BoundInputs) -> float:
    mc = inputs.mixing
    scale = inputs.L * inputs.beta**2 * mc.c_beta
    return 12.0 * scale * inputs.sigma2 + 36.0 * scale * mc.d_beta * inputs.b2


def theorem1_stepsize(inputs: BoundInputs) -> float:
    """gamma = min{1/(12 beta L D), (r0/(r1(T+1)))^(1/2), (r0/(r2(T+1)))^(1/3)}.

    Candidates whose denominator vanishes are treated as +inf. r2 keeps
    both the sigma^2 and the b^2 terms (coefficients 12 and 36).
    """
    if inputs.T < 1:
        raise DomainError(f"T must be >= 1, got {inputs.T}")
    horizon = inputs.T + 1
    denominator = 12.0 * inputs.beta * inputs.L * inputs.mixing.d_beta
    r1, r2 = _r1(inputs), _r2(inputs)
    candidates = [
        1.0 / denominator if denominator > 0 else math.inf,
        math.sqrt(inputs.r0 / (r1 * horizon)) if r1 > 0 else math.inf,
        (inputs.r0 / (r2 * horizon)) ** (1.0 / 3.0) if r2 > 0 else math.inf,
    ]
    return min(candidates)


def convex_bound(inputs: BoundInputs) -> float:
    """Upper bound on E f(x_hat^(T)) - f(x*) under the theorem-1 step size."""
    horizon = inputs.T + 1
    mc = inputs.mixing
    r0, r1, r2 = inputs.r0, _r1(inputs), _r2(inputs)
    deterministic = 12.0 * r0 * inputs.L * mc.d_beta * inputs.beta / horizon
    value = (
        deterministic
        + 2.0 * math.sqrt(r0 * r1 / horizon)
        + 2.0 * r2 ** (1.0 / 3.0) * (r0 / horizon) ** (2.0 / 3.0)
    )
    if value == 0.0:
        logger.info(
            "Convex bound is 0: noiseless, homogeneous and beta = 0, so the "
            "deterministic term 12 r0 L D beta/(T+1) vanishes"
        )
    return value


def nonconvex_bound(inputs: BoundInputs) -> float:
    """Bound on (1/(T+1)) sum_k E|grad f(x_bar^(k))|^2 at a fixed step gamma.

    Requires gamma <= 1/(9 L H beta); ``inputs.r0`` is 4 E f(x_bar^(0)).
    """
    gamma = inputs.gamma
    if gamma is None or gamma < 0:
        raise PreconditionError("nonconvex_bound needs a nonnegative step size gamma")
    L, beta = inputs.L, inputs.beta
    if beta > 0 and gamma > 1.0 / (9.0 * L * inputs.H * beta):
        raise PreconditionError(
            f"gamma={gamma:.4g} exceeds 1/(9 L H beta)="
            f"{1.0 / (9.0 * L * inputs.H * beta):.4g}"
        )
    if gamma == 0:
        return math.inf
    mc = inputs.mixing
    f0 = inputs.r0 / 4.0
    scale = L**2 * gamma**2 * beta**2 * mc.c_beta
    return (
        8.0 * f0 / ((inputs.T + 1) * gamma)
        + 4.0 * gamma * L * inputs.sigma2 / inputs.n
        + 24.0 * scale * inputs.sigma2
        + 72.0 * scale * mc.d_beta * inputs.b_hat2
    )


def corollary1_bound(inputs: BoundInputs, H_max: float) -> float:
    """Non-convex bound for time-varying periods, H replaced by ``H_max``."""
    return nonconvex_bound(replace(inputs, H=H_max))


@dataclass(frozen=True)
class RateTerms:
    sgd: float
    overhead: float


def rate_terms(family: AlgorithmFamily | str, inputs: BoundInputs) -> RateTerms:
    """Order-level rate split into the linear-speedup term and the rest."""
    family = AlgorithmFamily(family)
    n, T = inputs.n, inputs.T
    sigma, b = math.sqrt(inputs.sigma2), math.sqrt(inputs.b2)
    sgd = sigma / math.sqrt(n * T)
    if family == AlgorithmFamily.LOCAL:
        H = inputs.H
        overhead = (
            H ** (1 / 3) * sigma ** (2 / 3) / T ** (2 / 3)
            + H ** (2 / 3) * b ** (2 / 3) / T ** (2 / 3)
            + H / T
        )
        return RateTerms(sgd=sgd, overhead=overhead)
    if family == AlgorithmFamily.GOSSIP:
        c_beta = d_beta = 1.0 / (1.0 - inputs.beta)
    else:
        mc = inputs.mixing
        c_beta, d_beta = mc.c_beta, mc.d_beta
    beta = inputs.beta
    overhead = (
        c_beta ** (1 / 3)
        * beta ** (2 / 3)
        * (sigma ** (2 / 3) + d_beta ** (1 / 3) * b ** (2 / 3))
        / T ** (2 / 3)
        + beta * d_beta / T
    )
    return RateTerms(sgd=sgd, overhead=overhead)


def in_linear_speedup(family: AlgorithmFamily | str, inputs: BoundInputs) -> bool:
    terms = rate_terms(family, inputs)
    return terms.sgd >= terms.overhead


def transient_predict(
    family: AlgorithmFamily | str,
    n: int,
    beta: float,
    H: float,
    scenario: Heterogeneity | str,
) -> float:
    """Transient-stage length, without hidden constants.

    Products are evaluated in the same order for every family so that the
    orderings between families hold exactly in floating point.
    """
    family, scenario = AlgorithmFamily(family), Heterogeneity(scenario)
    cube = float(n) ** 3
    non_iid = scenario == Heterogeneity.NON_IID
    if family == AlgorithmFamily.LOCAL:
        if math.isinf(H):
            raise DomainError("Local SGD needs a finite period H")
        value = cube * (H * H)
        return value * (H * H) if non_iid else value

    prefactor = cube * beta**4
    if family == AlgorithmFamily.GOSSIP:
        if beta >= 1.0:
            raise InfiniteTransientError("Gossip SGD never leaves its transient stage at beta = 1")
        inverse_gap = 1.0 / (1.0 - beta)
        value = prefactor * (inverse_gap * inverse_gap)
        return value * (inverse_gap * inverse_gap) if non_iid else value

    if math.isinf(H):
        raise DomainError("Gossip-PGA needs a finite period H")
    mc = mixing_constants(beta, H)
    value = prefactor * (mc.c_beta * mc.c_beta)
    return value * (mc.d_beta * mc.d_beta) if non_iid else value


def transient_predict_full(
    family: AlgorithmFamily | str,
    n: int,
    beta: float,
    H: float,
    scenario: Heterogeneity | str,
) -> float:
    """Max-form transient length keeping the lower-order n-linear terms.

    Agrees with :func:`transient_predict` whenever n beta > 1 dominates.
    """
    family, scenario = AlgorithmFamily(family), Heterogeneity(scenario)
    main = transient_predict(family, n, beta, H, scenario)
    if family == AlgorithmFamily.LOCAL:
        extra = [float(n) ** 3 * H**2, n * H**2]
    elif family == AlgorithmFamily.GOSSIP:
        inverse_gap = 1.0 / (1.0 - beta)
        extra = [float(n) ** 3 * beta**4 * inverse_gap**2, n * beta**2 * inverse_gap**2]
    else:
        mc = mixing_constants(beta, H)
        extra = [float(n) ** 3 * beta**4 * mc.c_beta**2, n * beta**2 * mc.d_beta**2]
    return max([main, *extra])


def comm_components(
    model: CommModel, method: CommMethod | str, H: float = math.inf
) -> tuple[float, float]:
    """Per-iteration communication time split into (theta part, alpha part)."""
    method = CommMethod(method)
    allreduce = (2.0 * model.theta * model.d, model.n * model.alpha)
    gossip = (model.degree * model.theta * model.d, model.alpha)
    share = 0.0 if math.isinf(H) else 1.0 / H
    match method:
        case CommMethod.ALLREDUCE:
            return allreduce
        case CommMethod.GOSSIP:
            return gossip
        case CommMethod.PGA_AMORTIZED:
            return (
                gossip[0] + allreduce[0] * share,
                gossip[1] + allreduce[1] * share,
            )
        case CommMethod.LOCAL_AMORTIZED:
            return allreduce[0] * share, allreduce[1] * share
    raise ValueError(f"Unknown communication method {method}")


def comm_time_per_iter(
    model: CommModel, method: CommMethod | str, H: float = math.inf
) -> float:
    theta_part, alpha_part = comm_components(model, method, H)
    return theta_part + alpha_part


FAMILY_METHODS = {
    AlgorithmFamily.GOSSIP: CommMethod.GOSSIP,
    AlgorithmFamily.GOSSIP_PGA: CommMethod.PGA_AMORTIZED,
    AlgorithmFamily.LOCAL: CommMethod.LOCAL_AMORTIZED,
}


def transient_time(
    family: AlgorithmFamily | str,
    model: CommModel,
    n: int,
    beta: float,
    H: float,
    scenario: Heterogeneity | str,
) -> float:
    """Transient stage (iterations) times communication time per iteration."""
    family = AlgorithmFamily(family)
    iterations = transient_predict(family, n, beta, H, scenario)
    sized = model.model_copy(update={"n": n})
    return iterations * comm_time_per_iter(sized, FAMILY_METHODS[family], H)


def transient_time_components(
    family: AlgorithmFamily | str,
    model: CommModel,
    n: int,
    beta: float,
    H: float,
    scenario: Heterogeneity | str,
) -> tuple[float, float]:
    family = AlgorithmFamily(family)
    iterations = transient_predict(family, n, beta, H, scenario)
    sized = model.model_copy(update={"n": n})
    theta_part, alpha_part = comm_components(sized, FAMILY_METHODS[family], H)
    return iterations * theta_part, iterations * alpha_part


TOPOLOGY_MODEL_DEGREE = {TopologyModel.GRID: 5, TopologyModel.RING: 3}


def topology_model_beta(model: TopologyModel | str, n: int) -> float:
    """beta of the asymptotic grid (1 - 1/n) and ring (1 - 1/n^2) models."""
    model = TopologyModel(model)
    return 1.0 - 1.0 / n if model == TopologyModel.GRID else 1.0 - 1.0 / n**2


def fit_exponent(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    slope, _ = np.polyfit(np.log(ns), np.log(values), 1)
    return float(slope)


@dataclass(frozen=True)
class OverheadProfile:
    """Measured per-iteration costs of a training workload, in milliseconds."""

    name: str
    compute_ms: float
    allreduce_ms: float
    gossip_ms: float


OVERHEAD_PROFILES = {
    "resnet50": OverheadProfile("resnet50", 146.0, 278.0, 150.0),
    "bert": OverheadProfile("bert", 445.0, 1468.8, 566.5),
}


def profiled_iteration_time(
    profile: OverheadProfile, method: CommMethod | str, H: float = math.inf
) -> float:
    """Average iteration time (ms) when every H-th gossip round is replaced by
    an All-Reduce."""
    method = CommMethod(method)
    share = 0.0 if math.isinf(H) else 1.0 / H
    match method:
        case CommMethod.ALLREDUCE:
            comm = profile.allreduce_ms
        case CommMethod.GOSSIP:
            comm = profile.gossip_ms
        case CommMethod.PGA_AMORTIZED:
            comm = (1.0 - share) * profile.gossip_ms + share * profile.allreduce_ms
        case CommMethod.LOCAL_AMORTIZED:
            comm = share * profile.allreduce_ms
    return profile.compute_ms + comm
