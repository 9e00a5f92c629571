"""Synchronous iteration engine for Gossip-PGA and the algorithms it reduces to.

Every iteration computes all local stochastic gradients against the current
parameters, takes the local step, then either averages globally or performs
one gossip round:

    x_i^{k+1/2} = x_i^k - gamma_k g_i
    x^{k+1}     = mean(x^{k+1/2})        if this is a sync iteration
                = W^{(k)} x^{k+1/2}      otherwise

Parallel SGD syncs every iteration, Gossip SGD never, Local SGD replaces the
gossip round by the identity, and Gossip-AGA grows its period from observed
mini-batch losses.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, DomainError, UnsupportedScheduleError
from .metrics import MetricRecord, MetricsSink, SyncEvent, Trajectory, consensus_sq
from .models import (
    CommModel,
    ConstantStep,
    HalvingStep,
    RunConfig,
    Theorem1Step,
    Variant,
)
from .problem import (
    LogisticProblem,
    ReferenceSolution,
    global_grad,
    global_loss,
    node_streams,
    sample_batches,
    solve_reference,
)
from .topology import Topology, TopologyKind

logger = logging.getLogger(__name__)

LOSS_FLOOR = 1e-12


@dataclass
class WorkerState:
    """Parameters of every node plus the bookkeeping of one run."""

    x: np.ndarray  # (n, d)
    iter: int = 0
    period_counter: int = 0
    current_H: float = math.inf
    f_init: float = 0.0
    running_sum: np.ndarray | None = None
    running_count: int = 0
    last_loss: float = math.nan
    synced: bool = False
    streams: list[np.random.Generator] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> np.ndarray:
        return self.x.mean(axis=0)

    @property
    def running_avg(self) -> np.ndarray:
        """x_hat = average of x_bar over all iterations so far, 0 included."""
        return self.running_sum / self.running_count


def initial_period(config: RunConfig) -> float:
    match config.variant:
        case Variant.PARALLEL:
            return 1.0
        case Variant.GOSSIP:
            return math.inf
        case Variant.GOSSIP_AGA:
            return float(config.aga.H_init)
    return config.period


def init_state(
    problem: LogisticProblem, config: RunConfig, seed: int = 0, trial: int = 0
) -> WorkerState:
    if config.init is None:
        x = np.zeros((problem.n, problem.d))
    else:
        if len(config.init) != problem.d:
            raise ValueError(
                f"init has {len(config.init)} entries, the problem has d={problem.d}"
            )
        x = np.tile(np.asarray(config.init, dtype=float), (problem.n, 1))
    return WorkerState(
        x=x,
        current_H=initial_period(config),
        running_sum=x.mean(axis=0),
        running_count=1,
        streams=node_streams(seed, trial, problem.n),
    )


def step_size_at(config: RunConfig, k: int) -> float:
    schedule = config.step_schedule
    match schedule:
        case ConstantStep():
            return schedule.gamma
        case HalvingStep():
            return schedule.gamma0 * 0.5 ** (k // schedule.every)
        case Theorem1Step():
            if schedule.gamma is None:
                raise UnsupportedScheduleError(
                    "theorem1 step size must be resolved from problem constants first"
                )
            return schedule.gamma
    raise UnsupportedScheduleError(f"Unknown step schedule {schedule!r}")


def warmup_iters(config: RunConfig) -> int:
    """K_w: explicit, else the first learning-rate phase, else T/10."""
    if config.aga.warmup_iters is not None:
        return config.aga.warmup_iters
    if isinstance(config.step_schedule, HalvingStep):
        return config.step_schedule.every
    return math.ceil(config.T / 10)


def global_average(X: np.ndarray) -> np.ndarray:
    """Replace every row by the network mean; rows come out bit-identical."""
    if (X == X[0]).all():
        return X.copy()
    return np.broadcast_to(X.mean(axis=0), X.shape).copy()


def mix(topology: Topology, X: np.ndarray, k: int) -> np.ndarray:
    """One gossip round with the weights of iteration ``k``."""
    if topology.kind == TopologyKind.FULLY_CONNECTED:
        return global_average(X)
    if topology.kind == TopologyKind.DISCONNECTED_IDENTITY or (X == X[0]).all():
        return X.copy()
    return topology.weights_at(k) @ X


def is_sync(state: WorkerState, config: RunConfig, k: int) -> bool:
    match config.variant:
        case Variant.PARALLEL:
            return True
        case Variant.GOSSIP:
            return False
        case Variant.GOSSIP_AGA:
            return state.period_counter >= state.current_H
    H = config.period
    return not math.isinf(H) and (k + 1) % int(H) == 0


def aga_update(
    state: WorkerState, loss: float, config: RunConfig, k: int | None = None
) -> WorkerState:
    """Period update at a Gossip-AGA sync iteration.

    During warm-up ``f_init`` tracks a halving running average of the loss;
    afterwards the period becomes ceil(f_init / F * H_init).
    """
    k = state.iter if k is None else k
    if loss <= 0:
        logger.warning(
            f"Non-positive mini-batch loss {loss} at iteration {k}, clamped to {LOSS_FLOOR}"
        )
        loss = LOSS_FLOOR
    if k < warmup_iters(config):
        state.f_init = 0.5 * (state.f_init + loss)
    else:
        state.current_H = float(
            max(1, math.ceil(state.f_init / loss * config.aga.H_init))
        )
    state.period_counter = 0
    return state


def theoretical_period_schedule(F0: float, F_ell: float, H0: int) -> int:
    """H^(l) = ceil((F0 / F_ell)^(1/4) H0)."""
    if F0 <= 0 or F_ell <= 0:
        raise DomainError(f"Losses must be positive, got F0={F0}, F_ell={F_ell}")
    return math.ceil((F0 / F_ell) ** 0.25 * H0)


def step(
    state: WorkerState,
    problem: LogisticProblem,
    topology: Topology,
    config: RunConfig,
    k: int,
) -> WorkerState:
    """Advance ``state`` from iteration ``k`` to ``k + 1`` in place."""
    gamma = step_size_at(config, k)
    with np.errstate(over="ignore", invalid="ignore"):
        grads, losses = sample_batches(
            problem, state.x, config.batch_size, state.streams, config.full_batch
        )
        half = state.x - gamma * grads

        if config.variant == Variant.GOSSIP_AGA:
            state.period_counter += 1
        state.synced = is_sync(state, config, k)
        state.last_loss = float(losses.mean())
        if state.synced:
            state.x = global_average(half)
            if config.variant == Variant.GOSSIP_AGA:
                aga_update(state, state.last_loss, config, k)
        elif config.variant == Variant.LOCAL:
            state.x = half
        else:
            state.x = mix(topology, half, k)

    if not np.isfinite(state.x).all():
        raise DivergenceError(k)
    state.iter = k + 1
    state.running_sum = state.running_sum + state.x.mean(axis=0)
    state.running_count += 1
    return state


def iteration_cost(
    topology: Topology, comm: CommModel | None, config: RunConfig, synced: bool
) -> float:
    """Modeled seconds spent communicating in one iteration."""
    if comm is None or topology.n == 1:
        return 0.0
    allreduce = 2.0 * comm.theta * comm.d + topology.n * comm.alpha
    if synced or topology.kind == TopologyKind.FULLY_CONNECTED:
        return allreduce
    if config.variant == Variant.LOCAL or topology.kind == TopologyKind.DISCONNECTED_IDENTITY:
        return 0.0
    return topology.degree * comm.theta * comm.d + comm.alpha


def measure(
    state: WorkerState, problem: LogisticProblem, f_star: float, model_time: float
) -> MetricRecord:
    x_bar = state.mean
    grad = global_grad(problem, x_bar)
    return MetricRecord(
        iter=state.iter,
        consensus_sq=consensus_sq(state),
        gap=global_loss(problem, x_bar) - f_star,
        avg_gap=global_loss(problem, state.running_avg) - f_star,
        grad_sq=float(grad @ grad),
        model_time=model_time,
        current_H=state.current_H,
    )


def run(
    problem: LogisticProblem,
    topology: Topology,
    config: RunConfig,
    sink: MetricsSink | None = None,
    *,
    trial: int = 0,
    log_interval: int = 10,
    reference: ReferenceSolution | None = None,
    comm_model: CommModel | None = None,
) -> Trajectory:
    """Execute ``config.T`` iterations, logging at k = 0, every
    ``log_interval`` iterations and at k = T."""
    if topology.n != problem.n:
        raise ValueError(f"Topology has {topology.n} nodes, problem has {problem.n}")
    if reference is None:
        reference = solve_reference(problem)
    seed = config.seed if config.seed is not None else 0
    state = init_state(problem, config, seed=seed, trial=trial)
    trajectory = Trajectory(
        meta={
            "label": config.label,
            "variant": str(config.variant),
            "topology": str(topology.kind),
            "n": problem.n,
            "H": config.period,
            "T": config.T,
            "seed": seed,
            "trial": trial,
        }
    )
    model_time = 0.0

    def log_point() -> None:
        record = measure(state, problem, reference.f_star, model_time)
        trajectory.append(record)
        if sink is not None:
            sink.record(record)

    log_point()
    for k in range(config.T):
        period = state.current_H
        try:
            step(state, problem, topology, config, k)
        except DivergenceError as e:
            e.trajectory = trajectory
            logger.warning(f"{config.label} trial {trial} diverged at iteration {k}")
            raise
        model_time += iteration_cost(topology, comm_model, config, state.synced)
        if state.synced:
            trajectory.sync_log.append(SyncEvent(iter=k, loss=state.last_loss, period=period))
        if state.iter % log_interval == 0 or state.iter == config.T:
            log_point()

    logger.debug(
        f"{config.label} trial {trial}: {len(trajectory.sync_log)} global averages "
        f"in {config.T} iterations"
    )
    return trajectory


def save_checkpoint(state: WorkerState, path: str | Path) -> Path:
    """Write the state as CSV: scalar rows, then x_hat's running sum, then one
    row per node and one JSON-encoded RNG state per node."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", state.iter])
        writer.writerow(["period_counter", state.period_counter])
        writer.writerow(["current_H", state.current_H])
        writer.writerow(["f_init", state.f_init])
        writer.writerow(["running_count", state.running_count])
        writer.writerow(["running_sum", *state.running_sum.tolist()])
        for i, row in enumerate(state.x.tolist()):
            writer.writerow([f"node_{i}", *row])
        for i, stream in enumerate(state.streams):
            writer.writerow([f"rng_{i}", json.dumps(stream.bit_generator.state)])
    logger.info(f"Saved checkpoint at iteration {state.iter} to {path}")
    return path


def _restore_stream(encoded: str) -> np.random.Generator:
    state = json.loads(encoded)
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def _numbered(rows: dict[str, list[str]], prefix: str) -> list[str]:
    return sorted(
        (key for key in rows if key.startswith(prefix)),
        key=lambda key: int(key.removeprefix(prefix)),
    )


def load_checkpoint(path: str | Path) -> WorkerState:
    """Restore a state written by :func:`save_checkpoint`, RNG streams included,
    so stepping on continues the interrupted run exactly."""
    with open(path, newline="") as f:
        rows = {row[0]: row[1:] for row in csv.reader(f) if row}
    return WorkerState(
        x=np.array([[float(v) for v in rows[key]] for key in _numbered(rows, "node_")]),
        iter=int(rows["iter"][0]),
        period_counter=int(rows["period_counter"][0]),
        current_H=float(rows["current_H"][0]),
        f_init=float(rows["f_init"][0]),
        running_sum=np.array([float(v) for v in rows["running_sum"]]),
        running_count=int(rows["running_count"][0]),
        streams=[_restore_stream(rows[key][0]) for key in _numbered(rows, "rng_")],
    )
