"""Per-iteration measurements, trial aggregation and transient detection."""

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GridMismatchError, UnsupportedScheduleError
from .models import ConstantStep, Theorem1Step
from .problem import ProblemConstants
from .topology import mixing_constants

logger = logging.getLogger(__name__)

METRICS = ("consensus_sq", "gap", "avg_gap", "grad_sq", "model_time")

TRAJECTORY_COLUMNS = [
    "trial",
    "iter",
    "variant",
    "topology",
    "n",
    "H",
    *METRICS,
    "current_H",
]


@dataclass(frozen=True)
class MetricRecord:
    iter: int
    consensus_sq: float
    gap: float
    avg_gap: float
    grad_sq: float
    model_time: float
    current_H: float


@dataclass(frozen=True)
class SyncEvent:
    """A global-averaging iteration, with the node-averaged mini-batch loss."""

    iter: int
    loss: float
    period: float


@dataclass
class Trajectory:
    """Logged records of one trial plus its run metadata."""

    records: list[MetricRecord] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)
    sync_log: list[SyncEvent] = field(default_factory=list)

    def append(self, record: MetricRecord) -> None:
        if self.records:
            last = self.records[-1]
            if record.iter <= last.iter:
                raise ValueError(
                    f"Logged iterations must increase: {record.iter} after {last.iter}"
                )
            if record.model_time < last.model_time:
                raise ValueError("model_time must be non-decreasing")
        if record.consensus_sq < 0:
            raise ValueError(f"consensus_sq must be >= 0, got {record.consensus_sq}")
        self.records.append(record)

    @property
    def iters(self) -> np.ndarray:
        return np.array([record.iter for record in self.records], dtype=int)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(record, name) for record in self.records], dtype=float)

    def metric_array(self) -> np.ndarray:
        """(records, metrics) array of the values compared across variants.

        ``current_H`` is left out: it reports configuration, not state.
        """
        return np.array(
            [[record.iter, *(getattr(record, m) for m in METRICS)] for record in self.records],
            dtype=float,
        ).reshape(len(self.records), len(METRICS) + 1)

    @property
    def sync_fraction(self) -> float:
        total = self.meta.get("T") or 0
        return len(self.sync_log) / total if total else 0.0

    @property
    def realized_h_max(self) -> float:
        """Longest averaging period in force at any sync (inf if never synced)."""
        if not self.sync_log:
            return math.inf
        return max(event.period for event in self.sync_log)


@dataclass(frozen=True, eq=False)
class TrialEnsemble:
    trajectories: list[Trajectory]
    iters: np.ndarray
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    @property
    def meta(self) -> dict[str, Any]:
        return self.trajectories[0].meta


class MetricsSink(Protocol):
    def record(self, record: MetricRecord) -> None: ...


class LoggingSink:
    """Forward every logged record to the module logger at DEBUG level."""

    def __init__(self, label: str = ""):
        self.label = label

    def record(self, record: MetricRecord) -> None:
        logger.debug(
            f"[{self.label}] k={record.iter} gap={record.gap:.6e} "
            f"consensus={record.consensus_sq:.6e} H={record.current_H}"
        )


def consensus_sq(state) -> float:
    """sum_i |x_i - x_bar|^2 of a WorkerState or an (n, d) array."""
    X = np.asarray(getattr(state, "x", state), dtype=float)
    if (X == X[0]).all():
        return 0.0
    deviation = X - X.mean(axis=0)
    return float(np.sum(deviation * deviation))


def _check_grid(trajectories: list[Trajectory]) -> np.ndarray:
    if not trajectories:
        raise ValueError("At least one trajectory is required")
    grid = trajectories[0].iters
    for trajectory in trajectories[1:]:
        if not np.array_equal(trajectory.iters, grid):
            raise GridMismatchError("Trajectories do not share a logging grid")
    return grid


def aggregate(trajectories: list[Trajectory]) -> TrialEnsemble:
    """Pointwise mean and sample standard deviation (divisor n - 1)."""
    grid = _check_grid(trajectories)
    mean, std = {}, {}
    for name in (*METRICS, "current_H"):
        values = np.stack([trajectory.column(name) for trajectory in trajectories])
        # Points where all trials agree keep the member value exactly.
        unanimous = (values == values[0]).all(axis=0)
        with np.errstate(invalid="ignore"):
            mean[name] = np.where(unanimous, values[0], values.mean(axis=0))
            if len(trajectories) > 1:
                std[name] = np.where(unanimous, 0.0, values.std(axis=0, ddof=1))
            else:
                std[name] = np.zeros(len(grid))
    return TrialEnsemble(trajectories=list(trajectories), iters=grid, mean=mean, std=std)


def detect_transient(
    candidate: TrialEnsemble,
    reference: TrialEnsemble,
    rel_tol: float = 0.05,
    window: int = 50,
) -> int | None:
    """First logged iteration from which the candidate mean gap stays within
    (1 + rel_tol) of the reference for ``window`` consecutive logged points.

    Runs shorter than ``window`` use their full length as the window.
    """
    if not np.array_equal(candidate.iters, reference.iters):
        raise GridMismatchError("Candidate and reference use different logging grids")
    matched = candidate.mean["gap"] <= (1.0 + rel_tol) * reference.mean["gap"]
    if matched.size == 0:
        return None
    span = min(window, matched.size)
    sustained = sliding_window_view(matched, span).all(axis=1)
    if not sustained.any():
        return None
    return int(candidate.iters[int(np.argmax(sustained))])


@dataclass(frozen=True)
class LemmaReport:
    lhs: float
    rhs: float
    passed: bool
    trials: int
    precondition_met: bool
    sync_aligned: bool = False


def consensus_lemma_check(
    ensemble: TrialEnsemble,
    constants: ProblemConstants,
    schedule: ConstantStep | Theorem1Step,
    H: float,
    beta: float,
    batch_size: int = 1,
) -> LemmaReport:
    """Compare the running consensus distance with its bound

        2 c2 D_beta mean(f(x_bar) - f*) + 2 c3,

    c2 = 12 n beta^2 D_beta gamma^2 L and
    c3 = 2 n beta^2 gamma^2 C_beta (3 D_beta b^2 + sigma^2).
    Averages run over the logging grid; log every iteration for the exact sum.
    A grid whose interior points all fall on multiples of H only sees the
    zero consensus right after each global average; such reports carry
    ``sync_aligned`` and log a warning.
    """
    if isinstance(schedule, Theorem1Step) and schedule.gamma is not None:
        gamma = schedule.gamma
    elif isinstance(schedule, ConstantStep):
        gamma = schedule.gamma
    else:
        raise UnsupportedScheduleError(
            f"Consensus check needs a constant step size, got {schedule.kind}"
        )
    n = ensemble.meta["n"]
    mc = mixing_constants(beta, H)
    sigma2 = constants.sigma2 / batch_size
    c2 = 12.0 * n * beta**2 * mc.d_beta * gamma**2 * constants.L
    c3 = 2.0 * n * beta**2 * gamma**2 * mc.c_beta * (3.0 * mc.d_beta * constants.b2 + sigma2)
    lhs = float(np.mean(ensemble.mean["consensus_sq"]))
    rhs = float(2.0 * c2 * mc.d_beta * np.mean(ensemble.mean["gap"]) + 2.0 * c3)
    limit = 4.0 * constants.L * beta * mc.d_beta
    precondition_met = limit == 0 or gamma < 1.0 / limit
    if not precondition_met:
        logger.warning(f"gamma={gamma:.4g} violates gamma < 1/(4 L beta D_beta)")
    interior = ensemble.iters[ensemble.iters > 0][:-1]
    sync_aligned = H > 1 and interior.size > 0 and bool(np.all(interior % H == 0))
    if sync_aligned:
        logger.warning(
            f"Logging grid only samples multiples of H={H:g}; consensus is zero there "
            f"and the check is nearly vacuous, log every iteration instead"
        )
    return LemmaReport(
        lhs=lhs,
        rhs=rhs,
        passed=lhs <= rhs,
        trials=len(ensemble.trajectories),
        precondition_met=precondition_met,
        sync_aligned=sync_aligned,
    )


def _meta_row(meta: dict[str, Any]) -> dict[str, Any]:
    return {
        "variant": meta.get("variant", ""),
        "topology": meta.get("topology", ""),
        "n": meta.get("n", ""),
        "H": meta.get("H", ""),
    }


def write_trajectories(path: str | Path, trajectories: list[Trajectory]) -> Path:
    """One row per (trial, logged iteration)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        for trajectory in trajectories:
            base = {"trial": trajectory.meta.get("trial", 0), **_meta_row(trajectory.meta)}
            for record in trajectory.records:
                row = {f.name: getattr(record, f.name) for f in fields(record)}
                writer.writerow({**base, **row})
    logger.info(f"Wrote {len(trajectories)} trajectories to {path}")
    return path


def write_ensemble(path: str | Path, ensemble: TrialEnsemble) -> Path:
    """Mean and standard deviation per metric on the shared logging grid."""
    path = Path(path)
    stats = [f"{name}_{kind}" for name in (*METRICS, "current_H") for kind in ("mean", "std")]
    columns = ["iter", "variant", "topology", "n", "H", "trials", *stats]
    base = {**_meta_row(ensemble.meta), "trials": len(ensemble.trajectories)}
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for index, iteration in enumerate(ensemble.iters):
            row = {"iter": int(iteration), **base}
            for name in (*METRICS, "current_H"):
                row[f"{name}_mean"] = float(ensemble.mean[name][index])
                row[f"{name}_std"] = float(ensemble.std[name][index])
            writer.writerow(row)
    logger.info(f"Wrote ensemble of {len(ensemble.trajectories)} trials to {path}")
    return path
