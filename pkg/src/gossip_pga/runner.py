"""Experiment orchestration: builds problems and topologies, runs every
configured algorithm over its trials and writes the CSV outputs."""

import asyncio
import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import theory
from .config import ConfigManager
from .engine import run as run_engine
from .errors import DivergenceError, MissingReferenceError, UnsupportedScheduleError
from .metrics import (
    LoggingSink,
    TrialEnsemble,
    Trajectory,
    aggregate,
    detect_transient,
    write_ensemble,
    write_trajectories,
)
from .models import (
    CommModel,
    ExperimentConfig,
    RunConfig,
    RunnerSettings,
    Theorem1Step,
    TheoryTableSpec,
    Variant,
)
from .problem import (
    LogisticProblem,
    ProblemConstants,
    ReferenceSolution,
    estimate_constants,
    export_dataset,
    generate,
    solve_reference,
)
from .topology import Topology, beta, build_topology, export_weights

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "run",
    "variant",
    "topology",
    "n",
    "H",
    "trials",
    "diverged",
    "transient_iter",
    "sync_fraction",
    "realized_H_max",
]


@dataclass
class TrialOutcome:
    trial: int
    trajectory: Trajectory | None
    error: str | None = None


@dataclass
class SizeContext:
    """Everything shared by the runs of one network size."""

    problem: LogisticProblem
    topology: Topology
    reference: ReferenceSolution
    constants: ProblemConstants | None
    comm_model: CommModel | None


def execute_trial(
    problem: LogisticProblem,
    topology: Topology,
    config: RunConfig,
    trial: int,
    log_interval: int,
    reference: ReferenceSolution,
    comm_model: CommModel | None,
) -> TrialOutcome:
    """Run one trial; divergence is reported in the outcome instead of raised."""
    try:
        trajectory = run_engine(
            problem,
            topology,
            config,
            LoggingSink(f"{config.label}/{trial}"),
            trial=trial,
            log_interval=log_interval,
            reference=reference,
            comm_model=comm_model,
        )
    except DivergenceError as e:
        return TrialOutcome(trial=trial, trajectory=None, error=str(e))
    return TrialOutcome(trial=trial, trajectory=trajectory)


def resolve_theorem1(
    config: RunConfig,
    context: SizeContext,
) -> RunConfig:
    """Fill in the theorem-1 step size from the estimated problem constants."""
    if not isinstance(config.step_schedule, Theorem1Step):
        return config
    if config.step_schedule.gamma is not None:
        return config
    match config.variant:
        case Variant.PARALLEL:
            spectral, H = 0.0, 1.0
        case Variant.GOSSIP:
            spectral, H = beta(context.topology), math.inf
        case Variant.GOSSIP_PGA:
            spectral, H = beta(context.topology), config.period
        case Variant.GOSSIP_AGA:
            spectral, H = beta(context.topology), float(config.aga.H_init)
        case _:
            raise UnsupportedScheduleError(
                f"theorem1 step size is not defined for {config.variant}"
            )
    x0 = np.zeros(context.problem.d) if config.init is None else np.asarray(config.init)
    deviation = x0 - context.constants.x_star
    inputs = theory.BoundInputs.from_constants(
        context.constants,
        n=context.problem.n,
        T=config.T,
        H=H,
        beta=spectral,
        r0=2.0 * float(deviation @ deviation),
        batch_size=config.batch_size,
    )
    gamma = theory.theorem1_stepsize(inputs)
    logger.info(f"Resolved theorem-1 step size for {config.label}: gamma={gamma:.6g}")
    return config.model_copy(update={"step_schedule": Theorem1Step(gamma=gamma)})


class ExperimentRunner:
    """Runs every configured algorithm over its trials and writes CSV outputs."""

    def __init__(self, config_path: str | Path):
        self.config_manager = ConfigManager(config_path)
        self.config: ExperimentConfig | None = None

    def setup(self) -> ExperimentConfig:
        """Load the configuration and check cross-run requirements."""
        self.config = self.config_manager.load_config()
        transient = self.config.transient
        labels = [run.label for run in self.config.runs]
        if transient.enabled and transient.reference not in labels:
            raise MissingReferenceError(
                f"Transient detection needs a reference run named "
                f"'{transient.reference}', found {labels}"
            )
        logger.info(f"Experiment: {self.config_manager.get_experiment_info()}")
        return self.config

    def build_context(self, n: int) -> SizeContext:
        config = self.config
        spec = config.problem
        problem = generate(n, spec.M, spec.d, spec.heterogeneity, spec.seed)
        rows, cols = (None, None) if config.sizes else (config.topology.rows, config.topology.cols)
        topology = build_topology(config.topology.kind, n, rows, cols)
        logger.info(f"Built {topology.kind} topology with n={n}")
        reference = solve_reference(
            problem, tol=config.reference.tol, max_iters=config.reference.max_iters
        )
        constants = None
        if any(isinstance(run.step_schedule, Theorem1Step) for run in config.runs):
            constants = estimate_constants(
                problem,
                reference,
                mc_samples=config.reference.mc_samples,
                probes=config.reference.probes,
                seed=spec.seed,
            )
        comm_model = None
        if config.comm_model is not None:
            comm_model = config.comm_model.model_copy(update={"n": n})
        return SizeContext(problem, topology, reference, constants, comm_model)

    async def run_trials(
        self,
        context: SizeContext,
        run_config: RunConfig,
        trials: int,
        parallel: int,
    ) -> list[TrialOutcome]:
        """Run all trials of one configuration, in trial order."""
        args = [
            (
                context.problem,
                context.topology,
                run_config,
                trial,
                self.config.log_interval,
                context.reference,
                context.comm_model,
            )
            for trial in range(trials)
        ]
        if parallel <= 1 or trials == 1:
            return [execute_trial(*arguments) for arguments in args]

        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=min(parallel, trials)) as pool:
            futures = [loop.run_in_executor(pool, execute_trial, *arguments) for arguments in args]
            return list(await asyncio.gather(*futures))

    async def run_size(
        self, n: int, output_dir: Path, settings: RunnerSettings
    ) -> list[Path]:
        config = self.config
        trials = settings.trials or config.trials
        seed = settings.seed if settings.seed is not None else config.seed
        parallel = settings.parallel or os.cpu_count() or 1
        output_dir.mkdir(parents=True, exist_ok=True)
        context = self.build_context(n)

        written: list[Path] = []
        ensembles: dict[str, TrialEnsemble] = {}
        summary: list[dict] = []
        for run_config in config.runs:
            run_config = run_config.model_copy(
                update={"seed": run_config.seed if run_config.seed is not None else seed}
            )
            run_config = resolve_theorem1(run_config, context)
            logger.info(f"Running {run_config.label} (n={n}, {trials} trials)")
            outcomes = await self.run_trials(context, run_config, trials, parallel)

            diverged = [outcome for outcome in outcomes if outcome.trajectory is None]
            for outcome in diverged:
                logger.warning(f"{run_config.label} trial {outcome.trial}: {outcome.error}")
            finished = [outcome.trajectory for outcome in outcomes if outcome.trajectory]

            label = run_config.label
            written.append(
                write_trajectories(output_dir / f"{label}_trajectories.csv", finished)
            )
            row = {
                "run": label,
                "variant": str(run_config.variant),
                "topology": str(context.topology.kind),
                "n": n,
                "H": run_config.period,
                "trials": trials,
                "diverged": len(diverged),
                "transient_iter": "",
                "sync_fraction": "",
                "realized_H_max": "",
            }
            if finished:
                ensemble = aggregate(finished)
                ensembles[label] = ensemble
                written.append(write_ensemble(output_dir / f"{label}_ensemble.csv", ensemble))
                row["sync_fraction"] = float(np.mean([t.sync_fraction for t in finished]))
                row["realized_H_max"] = max(t.realized_h_max for t in finished)
            else:
                logger.error(f"Every trial of {label} diverged; no ensemble written")
            summary.append(row)

        if config.transient.enabled:
            written.append(self.write_summary(output_dir / "summary.csv", summary, ensembles))
        return written

    def write_summary(
        self, path: Path, rows: list[dict], ensembles: dict[str, TrialEnsemble]
    ) -> Path:
        settings = self.config.transient
        reference = ensembles.get(settings.reference)
        if reference is None:
            raise MissingReferenceError(
                f"Reference run '{settings.reference}' produced no trajectories"
            )
        for row in rows:
            ensemble = ensembles.get(row["run"])
            if ensemble is None:
                continue
            k0 = detect_transient(ensemble, reference, settings.rel_tol, settings.window)
            row["transient_iter"] = "none" if k0 is None else k0
            logger.info(f"Transient stage of {row['run']} (n={row['n']}): {row['transient_iter']}")
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        logger.info(f"Wrote transient summary to {path}")
        return path

    async def run(self, settings: RunnerSettings) -> list[Path]:
        if self.config is None:
            raise RuntimeError("Runner not setup. Call setup() first.")
        output_dir = settings.output_dir or self.config.output_dir
        if not self.config.sizes:
            return await self.run_size(self.config.problem.n, output_dir, settings)
        written = []
        for n in self.config.sizes:
            written += await self.run_size(n, output_dir / f"n{n}", settings)
        return written


async def run_experiment(config_path: str | Path, settings: RunnerSettings) -> list[Path]:
    """Run the experiment described by ``config_path``."""
    runner = ExperimentRunner(config_path)
    try:
        runner.setup()
        return await runner.run(settings)
    except Exception as e:
        logger.error(f"Failed to run experiment: {e}")
        raise


THEORY_COLUMNS = ["family", "topology_model", "scenario", "theta_exponent", "alpha_exponent"]
THEORY_VALUE_COLUMNS = [
    "family",
    "topology_model",
    "scenario",
    "n",
    "beta",
    "H",
    "transient_iters",
    "theta_time",
    "alpha_time",
]
PROFILE_COLUMNS = ["profile", "method", "H", "compute_ms", "iteration_ms"]


def theory_rows(
    spec: TheoryTableSpec, comm_model: CommModel | None = None
) -> tuple[list[dict], list[dict]]:
    """Exponent rows and per-n value rows, with H = sqrt(n)."""
    base = comm_model or CommModel(alpha=1.0, theta=1.0, d=1, n=1)
    exponents, values = [], []
    for family in spec.families:
        for topology_model in spec.topology_models:
            model = base.model_copy(
                update={"degree": theory.TOPOLOGY_MODEL_DEGREE[topology_model]}
            )
            for scenario in spec.scenarios:
                theta_times, alpha_times = [], []
                for n in spec.n_values:
                    spectral = theory.topology_model_beta(topology_model, n)
                    H = math.sqrt(n)
                    theta_part, alpha_part = theory.transient_time_components(
                        family, model, n, spectral, H, scenario
                    )
                    theta_times.append(theta_part)
                    alpha_times.append(alpha_part)
                    values.append(
                        {
                            "family": str(family),
                            "topology_model": str(topology_model),
                            "scenario": str(scenario),
                            "n": n,
                            "beta": spectral,
                            "H": H,
                            "transient_iters": theory.transient_predict(
                                family, n, spectral, H, scenario
                            ),
                            "theta_time": theta_part,
                            "alpha_time": alpha_part,
                        }
                    )
                fit = len(spec.n_values) >= 2
                exponents.append(
                    {
                        "family": str(family),
                        "topology_model": str(topology_model),
                        "scenario": str(scenario),
                        "theta_exponent": (
                            theory.fit_exponent(spec.n_values, theta_times) if fit else math.nan
                        ),
                        "alpha_exponent": (
                            theory.fit_exponent(spec.n_values, alpha_times) if fit else math.nan
                        ),
                    }
                )
    return exponents, values


def profile_rows(spec: TheoryTableSpec) -> list[dict]:
    rows = []
    for profile in theory.OVERHEAD_PROFILES.values():
        plans = [(theory.CommMethod.ALLREDUCE, math.inf), (theory.CommMethod.GOSSIP, math.inf)]
        plans += [
            (method, float(H))
            for H in spec.profile_periods
            for method in (theory.CommMethod.PGA_AMORTIZED, theory.CommMethod.LOCAL_AMORTIZED)
        ]
        for method, H in plans:
            rows.append(
                {
                    "profile": profile.name,
                    "method": str(method),
                    "H": "" if math.isinf(H) else int(H),
                    "compute_ms": profile.compute_ms,
                    "iteration_ms": theory.profiled_iteration_time(profile, method, H),
                }
            )
    return rows


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def emit_theory_tables(
    config: ExperimentConfig, output_dir: str | Path | None = None
) -> list[Path]:
    """Write transient-time exponents, per-n values and profiled overheads."""
    output_dir = Path(output_dir or config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    exponents, values = theory_rows(config.theory, config.comm_model)
    written = [
        _write_rows(output_dir / "theory_tables.csv", THEORY_COLUMNS, exponents),
        _write_rows(output_dir / "theory_values.csv", THEORY_VALUE_COLUMNS, values),
        _write_rows(
            output_dir / "overhead_profiles.csv", PROFILE_COLUMNS, profile_rows(config.theory)
        ),
    ]
    for row in exponents:
        logger.info(
            f"{row['family']} on {row['topology_model']} ({row['scenario']}): "
            f"n^{row['theta_exponent']:.2f} theta d + n^{row['alpha_exponent']:.2f} alpha"
        )
    return written


def export_experiment_dataset(
    config: ExperimentConfig, output_dir: str | Path | None = None
) -> list[Path]:
    """Write the generated dataset and the mixing matrix used at k = 0."""
    output_dir = Path(output_dir or config.output_dir)
    spec = config.problem
    problem = generate(spec.n, spec.M, spec.d, spec.heterogeneity, spec.seed)
    topology = build_topology(
        config.topology.kind, spec.n, config.topology.rows, config.topology.cols
    )
    written = export_dataset(problem, output_dir / "dataset")
    output_dir.mkdir(parents=True, exist_ok=True)
    written.append(export_weights(topology, output_dir / "weights.csv"))
    return written
