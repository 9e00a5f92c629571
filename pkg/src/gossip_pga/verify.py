"""Self-check suites: mixing matrices, gradients, algorithm reductions,
bound certificates and theory tables."""

import logging
from collections.abc import Callable, Iterable

import numpy as np
from pydantic import BaseModel, Field

from . import theory
from .engine import run as run_engine
from .errors import UnsupportedTopologyError
from .metrics import aggregate
from .models import (
    AlgorithmFamily,
    ConstantStep,
    ExperimentConfig,
    ProblemSpec,
    RunConfig,
    TheoryTableSpec,
    TopologyModel,
    Variant,
)
from .problem import (
    Heterogeneity,
    LogisticProblem,
    estimate_constants,
    generate,
    global_grad,
    global_loss,
    solve_reference,
)
from .runner import SizeContext, resolve_theorem1, theory_rows
from .topology import (
    beta,
    build_fully_connected,
    build_grid,
    build_identity,
    build_one_peer_exponential,
    build_ring,
    build_static_exponential,
    build_topology,
    stochasticity_violations,
)

logger = logging.getLogger(__name__)

SUBSETS = ("topology", "gradients", "reductions", "bounds", "theory")

TABLE_EXPONENTS = {
    ("gossip", "grid", "non_iid"): (7.0, 7.0),
    ("gossip_pga", "grid", "non_iid"): (5.0, 5.5),
    ("gossip", "grid", "iid"): (5.0, 5.0),
    ("gossip_pga", "grid", "iid"): (4.0, 4.5),
    ("gossip", "ring", "non_iid"): (11.0, 11.0),
    ("gossip_pga", "ring", "non_iid"): (5.0, 5.5),
    ("gossip", "ring", "iid"): (7.0, 7.0),
    ("gossip_pga", "ring", "iid"): (4.0, 4.5),
}


class Check(BaseModel):
    """Outcome of one named check."""

    subset: str = Field(..., description="Suite the check belongs to")
    name: str = Field(..., description="Check name")
    passed: bool
    skipped: bool = Field(default=False, description="Not applicable to this input")
    measured: str = Field(default="", description="Measured value")
    expected: str = Field(default="", description="Expected value or bound")


class VerifyReport(BaseModel):
    checks: list[Check] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [check for check in self.checks if not check.passed]

    def render(self) -> str:
        lines = []
        for check in self.checks:
            status = "SKIP" if check.skipped else "PASS" if check.passed else "FAIL"
            line = f"[{status}] {check.subset}/{check.name}"
            if check.measured or check.expected:
                line += f": measured {check.measured}, expected {check.expected}"
            lines.append(line)
        lines.append(
            f"{len(self.checks) - len(self.failures)}/{len(self.checks)} checks passed"
        )
        return "\n".join(lines)


def default_weights() -> dict[str, np.ndarray]:
    weights = {
        "ring_20": build_ring(20).weights_at(0),
        "grid_4x5": build_grid(4, 5).weights_at(0),
        "static_exponential_8": build_static_exponential(8).weights_at(0),
        "static_exponential_12": build_static_exponential(12).weights_at(0),
        "fully_connected_6": build_fully_connected(6).weights_at(0),
        "identity_6": build_identity(6).weights_at(0),
    }
    one_peer = build_one_peer_exponential(8)
    for k in range(one_peer.schedule_period):
        weights[f"one_peer_exponential_8_k{k}"] = one_peer.weights_at(k)
    return weights


def check_topology(weights: dict[str, np.ndarray] | None = None) -> list[Check]:
    """Double stochasticity of every matrix, plus the ring spectral constants."""
    checks = []
    for name, matrix in (weights if weights is not None else default_weights()).items():
        problems = stochasticity_violations(matrix)
        checks.append(
            Check(
                subset="topology",
                name=f"double_stochasticity[{name}]",
                passed=not problems,
                measured="; ".join(problems) or "doubly stochastic",
                expected="nonnegative, unit row and column sums",
            )
        )
    if weights is None:
        for n, expected in ((20, 0.967), (50, 0.995), (100, 0.998)):
            value = beta(build_ring(n))
            checks.append(
                Check(
                    subset="topology",
                    name=f"ring_beta[n={n}]",
                    passed=abs(value - expected) <= 1e-3,
                    measured=f"{value:.4f}",
                    expected=f"{expected} +/- 0.001",
                )
            )
    return checks


def check_gradients(points: int = 100, seed: int = 0) -> list[Check]:
    """Central finite differences of f against the analytic gradient."""
    problem = generate(4, 50, 5, Heterogeneity.NON_IID, seed)
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for _ in range(points):
        x = rng.standard_normal(problem.d)
        analytic = global_grad(problem, x)
        numeric = np.array(
            [
                (global_loss(problem, x + h * e) - global_loss(problem, x - h * e)) / (2 * h)
                for e in np.eye(problem.d)
            ]
        )
        error = np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-12)
        worst = max(worst, float(error))
    return [
        Check(
            subset="gradients",
            name="finite_difference",
            passed=worst <= 1e-6,
            measured=f"max relative error {worst:.2e}",
            expected="<= 1e-6",
        )
    ]


def _trajectory(problem: LogisticProblem, kind: str, config: RunConfig, reference):
    topology = build_topology(kind, problem.n)
    return run_engine(problem, topology, config, log_interval=1, reference=reference)


def check_reductions(seeds: Iterable[int] = range(10), n: int = 8, T: int = 200) -> list[Check]:
    """Gossip-PGA reduces bit-for-bit to Gossip, Local and Parallel SGD."""
    problem = generate(n, 50, 10, Heterogeneity.NON_IID, 0)
    reference = solve_reference(problem)
    step = ConstantStep(gamma=0.05)
    pairs: dict[str, tuple[tuple[str, RunConfig], tuple[str, RunConfig]]] = {}
    mismatches: dict[str, list[int]] = {}
    for seed in seeds:
        common = {"T": T, "seed": seed, "step_schedule": step}
        pairs = {
            "pga_H_over_T_is_gossip": (
                ("ring", RunConfig(variant=Variant.GOSSIP_PGA, H=T + 1, **common)),
                ("ring", RunConfig(variant=Variant.GOSSIP, **common)),
            ),
            "pga_identity_is_local": (
                ("disconnected_identity", RunConfig(variant=Variant.GOSSIP_PGA, H=4, **common)),
                ("ring", RunConfig(variant=Variant.LOCAL, H=4, **common)),
            ),
            "pga_fully_connected_is_parallel": (
                ("fully_connected", RunConfig(variant=Variant.GOSSIP_PGA, H=4, **common)),
                ("ring", RunConfig(variant=Variant.PARALLEL, **common)),
            ),
            "pga_H1_is_parallel": (
                ("ring", RunConfig(variant=Variant.GOSSIP_PGA, H=1, **common)),
                ("ring", RunConfig(variant=Variant.PARALLEL, **common)),
            ),
        }
        for name, (left, right) in pairs.items():
            a = _trajectory(problem, *left, reference).metric_array()
            b = _trajectory(problem, *right, reference).metric_array()
            if not np.array_equal(a, b):
                mismatches.setdefault(name, []).append(seed)
    return [
        Check(
            subset="reductions",
            name=name,
            passed=name not in mismatches,
            measured=f"mismatching seeds {mismatches[name]}" if name in mismatches else "identical",
            expected="bit-identical trajectories",
        )
        for name in pairs
    ]


def check_bounds(
    config: ExperimentConfig | None = None, T: int = 200, trials: int = 5
) -> list[Check]:
    """Empirical f(x_hat^(T)) - f* against the convex bound at the theorem-1 step."""
    spec = config.problem if config else ProblemSpec(n=8, M=100, d=5)
    kind = config.topology.kind if config else "ring"
    problem = generate(spec.n, spec.M, spec.d, spec.heterogeneity, spec.seed)
    try:
        topology = build_topology(kind, spec.n)
        spectral = beta(topology)
    except UnsupportedTopologyError as e:
        logger.warning(f"Skipping bound certificate: {e}")
        return [
            Check(
                subset="bounds",
                name="convex_bound",
                passed=True,
                skipped=True,
                measured=f"skipped: {e}",
                expected="a static topology",
            )
        ]
    reference = solve_reference(problem)
    constants = estimate_constants(problem, reference)
    context = SizeContext(problem, topology, reference, constants, None)
    run_config = resolve_theorem1(
        RunConfig(
            variant=Variant.GOSSIP_PGA,
            T=T,
            H=4,
            step_schedule={"kind": "theorem1"},
        ),
        context,
    )
    trajectories = [
        run_engine(
            problem, topology, run_config, trial=trial, log_interval=T, reference=reference
        )
        for trial in range(trials)
    ]
    empirical = float(aggregate(trajectories).mean["avg_gap"][-1])
    inputs = theory.BoundInputs.from_constants(
        constants,
        n=spec.n,
        T=T,
        H=4.0,
        beta=spectral,
        r0=2.0 * float(constants.x_star @ constants.x_star),
    )
    bound = theory.convex_bound(inputs)
    logger.warning("Bound certificate uses estimated sigma^2 and b^2")
    return [
        Check(
            subset="bounds",
            name="convex_bound",
            passed=empirical <= bound,
            measured=f"mean gap {empirical:.4e}",
            expected=f"<= bound {bound:.4e}",
        )
    ]


def check_theory(points: int = 1000, seed: int = 0) -> list[Check]:
    """Transient-time exponents of the asymptotic tables and predictor dominance."""
    spec = TheoryTableSpec(
        families=[AlgorithmFamily.GOSSIP, AlgorithmFamily.GOSSIP_PGA],
        topology_models=[TopologyModel.GRID, TopologyModel.RING],
    )
    exponents, _ = theory_rows(spec)
    checks = []
    for row in exponents:
        key = (row["family"], row["topology_model"], row["scenario"])
        expected = TABLE_EXPONENTS[key]
        measured = (row["theta_exponent"], row["alpha_exponent"])
        checks.append(
            Check(
                subset="theory",
                name=f"exponents[{'/'.join(key)}]",
                passed=all(abs(m - e) <= 0.1 for m, e in zip(measured, expected)),
                measured=f"({measured[0]:.3f}, {measured[1]:.3f})",
                expected=f"{expected} +/- 0.1",
            )
        )

    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(points):
        n = int(rng.integers(2, 2049))
        spectral = float(rng.uniform(0.0, 1.0))
        H = float(rng.integers(1, 257))
        for scenario in Heterogeneity:
            pga = theory.transient_predict("gossip_pga", n, spectral, H, scenario)
            gossip = theory.transient_predict("gossip", n, spectral, H, scenario)
            local = theory.transient_predict("local", n, spectral, H, scenario)
            violations += int(not (pga <= gossip and pga <= local))
    checks.append(
        Check(
            subset="theory",
            name="pga_transient_dominance",
            passed=violations == 0,
            measured=f"{violations} violations",
            expected=f"0 over {points} points",
        )
    )
    return checks


def verify(
    config: ExperimentConfig | None = None,
    subsets: Iterable[str] | None = None,
    weights: dict[str, np.ndarray] | None = None,
) -> VerifyReport:
    """Run the selected suites (all by default) and collect their checks.

    ``weights`` replaces the built-in matrices of the topology suite.
    """
    suites: dict[str, Callable[[], list[Check]]] = {
        "topology": lambda: check_topology(weights),
        "gradients": check_gradients,
        "reductions": check_reductions,
        "bounds": lambda: check_bounds(config),
        "theory": check_theory,
    }
    report = VerifyReport()
    for subset in subsets or SUBSETS:
        if subset not in suites:
            raise ValueError(f"Unknown verify subset '{subset}', choose from {SUBSETS}")
        logger.info(f"Running {subset} checks")
        report.checks.extend(suites[subset]())
    for check in report.failures:
        logger.error(f"{check.subset}/{check.name} failed: {check.measured} vs {check.expected}")
    return report
