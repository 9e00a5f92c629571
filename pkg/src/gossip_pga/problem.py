"""Synthetic distributed logistic regression and its problem constants.

Each node ``i`` holds ``M`` samples ``(h_im, y_im)`` and the local objective

    f_i(x) = (1/M) sum_m log(1 + exp(-y_im h_im^T x)),

the network objective being ``f = (1/n) sum_i f_i``.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import NotConvergedError

logger = logging.getLogger(__name__)

FEATURE_VARIANCE = 10.0


class Heterogeneity(StrEnum):
    IID = "iid"
    NON_IID = "non_iid"


@dataclass(frozen=True, eq=False)
class LogisticProblem:
    n: int
    M: int
    d: int
    features: np.ndarray  # (n, M, d)
    labels: np.ndarray  # (n, M), entries +1/-1
    planted_params: np.ndarray  # (n, d), unit rows
    heterogeneity: Heterogeneity = Heterogeneity.NON_IID


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    x_star: np.ndarray
    f_star: float
    grad_norm: float
    iterations: int


@dataclass(frozen=True, eq=False)
class ProblemConstants:
    """Constants consumed by the bounds, all evaluated at (or around) x*.

    ``sigma2`` is the single-sample gradient variance at x* and ``b_hat2`` a
    probe-set lower bound of the uniform heterogeneity; both are estimates,
    so bound certificates built from them are approximate.
    """

    x_star: np.ndarray
    f_star: float
    L: float
    sigma2: float
    b2: float
    b_hat2: float
    notes: tuple[str, ...] = field(
        default=(
            "sigma2 evaluated at x* only",
            "b_hat2 is a probe-set lower bound",
        )
    )


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    return vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)


def generate(
    n: int,
    M: int,
    d: int,
    heterogeneity: Heterogeneity | str = Heterogeneity.NON_IID,
    seed: int = 0,
) -> LogisticProblem:
    """Draw the planted vectors, features and labels from one seeded stream."""
    if min(n, M, d) < 1:
        raise ValueError(f"n, M and d must be >= 1, got n={n}, M={M}, d={d}")
    heterogeneity = Heterogeneity(heterogeneity)
    rng = np.random.default_rng(seed)

    if heterogeneity == Heterogeneity.IID:
        planted = np.tile(_normalize_rows(rng.standard_normal(d)), (n, 1))
    else:
        planted = _normalize_rows(rng.standard_normal((n, d)))

    features = rng.normal(0.0, np.sqrt(FEATURE_VARIANCE), size=(n, M, d))
    probability = expit(np.einsum("nmd,nd->nm", features, planted))
    uniform = rng.uniform(size=(n, M))
    labels = np.where(uniform <= probability, 1.0, -1.0)

    logger.info(
        f"Generated {heterogeneity} logistic problem n={n} M={M} d={d} seed={seed}"
    )
    return LogisticProblem(
        n=n,
        M=M,
        d=d,
        features=features,
        labels=labels,
        planted_params=planted,
        heterogeneity=heterogeneity,
    )


def _loss(features: np.ndarray, labels: np.ndarray, x: np.ndarray) -> float:
    margins = -labels * (features @ x)
    return float(np.mean(np.logaddexp(0.0, margins)))


def _grad(features: np.ndarray, labels: np.ndarray, x: np.ndarray) -> np.ndarray:
    weights = -labels * expit(-labels * (features @ x))
    return features.T @ weights / features.shape[0]


def local_loss(problem: LogisticProblem, i: int, x: np.ndarray) -> float:
    return _loss(problem.features[i], problem.labels[i], x)


def local_grad(problem: LogisticProblem, i: int, x: np.ndarray) -> np.ndarray:
    return _grad(problem.features[i], problem.labels[i], x)


def global_loss(problem: LogisticProblem, x: np.ndarray) -> float:
    margins = -problem.labels * (problem.features @ x)
    return float(np.mean(np.logaddexp(0.0, margins)))


def global_grad(problem: LogisticProblem, x: np.ndarray) -> np.ndarray:
    X = np.broadcast_to(x, (problem.n, problem.d))
    return np.mean(all_local_grads(problem, X), axis=0)


def all_local_grads(problem: LogisticProblem, X: np.ndarray) -> np.ndarray:
    """Exact local gradients of every node, node ``i`` evaluated at ``X[i]``."""
    margins = np.einsum("nmd,nd->nm", problem.features, X)
    weights = -problem.labels * expit(-problem.labels * margins)
    return np.einsum("nmd,nm->nd", problem.features, weights) / problem.M


def node_streams(seed: int, trial: int, n: int) -> list[np.random.Generator]:
    """Independent RNG streams keyed by (seed, trial, node)."""
    root = np.random.SeedSequence(seed, spawn_key=(trial,))
    return [np.random.default_rng(child) for child in root.spawn(n)]


def stochastic_grad(
    problem: LogisticProblem,
    i: int,
    x: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
    full_batch: bool = False,
) -> np.ndarray:
    """Mean gradient over ``batch_size`` samples drawn with replacement.

    ``full_batch`` sweeps all ``M`` samples instead and returns
    :func:`local_grad` exactly.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if full_batch:
        return local_grad(problem, i, x)
    index = rng.integers(0, problem.M, size=batch_size)
    return _grad(problem.features[i, index], problem.labels[i, index], x)


def sample_batches(
    problem: LogisticProblem,
    X: np.ndarray,
    batch_size: int,
    streams: list[np.random.Generator],
    full_batch: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic gradients and mini-batch losses for all nodes at once.

    Node ``i`` draws its indices from ``streams[i]`` only, so results do not
    depend on how nodes are scheduled.
    """
    if full_batch:
        features, labels = problem.features, problem.labels
    else:
        index = np.stack(
            [stream.integers(0, problem.M, size=batch_size) for stream in streams]
        )
        rows = np.arange(problem.n)[:, None]
        features, labels = problem.features[rows, index], problem.labels[rows, index]
    margins = -labels * np.einsum("nbd,nd->nb", features, X)
    losses = np.mean(np.logaddexp(0.0, margins), axis=1)
    weights = -labels * expit(margins)
    grads = np.einsum("nbd,nb->nd", features, weights) / features.shape[1]
    return grads, losses


def _smoothness_bound(problem: LogisticProblem) -> float:
    """Upper bound on the curvature of f: lambda_max(H^T H) / (4 n M)."""
    stacked = problem.features.reshape(-1, problem.d)
    return float(np.linalg.norm(stacked, 2) ** 2) / (4 * stacked.shape[0])


def solve_reference(
    problem: LogisticProblem,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    armijo: float = 0.5,
) -> ReferenceSolution:
    """Full-batch gradient descent with halving backtracking.

    While the Armijo decrease is resolvable in f, steps start at 1 and halve
    until it holds. Once it drops below the floating-point resolution of f,
    steps start at 1/L and halve until the gradient norm shrinks instead.
    """
    x = np.zeros(problem.d)
    value = global_loss(problem, x)
    grad = global_grad(problem, x)
    grad_norm = float(np.linalg.norm(grad))
    inverse_smoothness = 1.0 / _smoothness_bound(problem)
    resolution = 64 * np.finfo(float).eps

    for iteration in range(max_iters):
        if grad_norm <= tol:
            logger.info(
                f"Reference solver converged in {iteration} iterations "
                f"(|grad f| = {grad_norm:.3e}, f* = {value:.12g})"
            )
            return ReferenceSolution(
                x_star=x, f_star=value, grad_norm=grad_norm, iterations=iteration
            )
        on_gradient = (
            armijo * inverse_smoothness * grad_norm**2 <= resolution * abs(value)
        )
        step = inverse_smoothness if on_gradient else 1.0
        while True:
            candidate = x - step * grad
            if on_gradient:
                candidate_grad = global_grad(problem, candidate)
                if np.linalg.norm(candidate_grad) < grad_norm:
                    break
            else:
                candidate_value = global_loss(problem, candidate)
                if candidate_value <= value - armijo * step * grad_norm**2:
                    break
            step *= 0.5
            if step < 1e-20:
                break
        x = candidate
        value = global_loss(problem, x)
        grad = global_grad(problem, x)
        grad_norm = float(np.linalg.norm(grad))

    if grad_norm <= tol:
        return ReferenceSolution(
            x_star=x, f_star=value, grad_norm=grad_norm, iterations=max_iters
        )
    raise NotConvergedError(
        f"Reference solver stopped after {max_iters} iterations with "
        f"|grad f| = {grad_norm:.3e} > {tol:.1e}",
        best_iterate=x,
        grad_norm=grad_norm,
    )


def _heterogeneity_at(problem: LogisticProblem, x: np.ndarray) -> float:
    grads = all_local_grads(problem, np.broadcast_to(x, (problem.n, problem.d)))
    return float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))


def estimate_constants(
    problem: LogisticProblem,
    reference: ReferenceSolution,
    mc_samples: int | None = None,
    probes: int = 8,
    seed: int = 0,
) -> ProblemConstants:
    """Estimate L, sigma^2, b^2 and b_hat^2 for the bound formulas.

    ``L`` uses the logistic Hessian bound H_i^T H_i / (4M). ``sigma2`` is the
    largest per-node variance of single-sample gradients at x*, exact over
    all M samples when ``mc_samples`` is None and Monte-Carlo otherwise.
    """
    x_star = reference.x_star
    rng = np.random.default_rng(seed)

    L = max(
        float(np.linalg.norm(problem.features[i], 2) ** 2) / (4 * problem.M)
        for i in range(problem.n)
    )

    X_star = np.broadcast_to(x_star, (problem.n, problem.d))
    local = all_local_grads(problem, X_star)
    b2 = 0.0 if problem.n == 1 else float(np.mean(np.sum(local**2, axis=1)))

    sigma2 = 0.0
    for i in range(problem.n):
        features, labels = problem.features[i], problem.labels[i]
        if mc_samples is not None:
            index = rng.integers(0, problem.M, size=mc_samples)
            features, labels = features[index], labels[index]
        weights = -labels * expit(-labels * (features @ x_star))
        per_sample = features * weights[:, None]
        variance = np.mean(np.sum((per_sample - local[i]) ** 2, axis=1))
        sigma2 = max(sigma2, float(variance))

    directions = _normalize_rows(rng.standard_normal((probes, problem.d)))
    probe_points = [x_star, np.zeros(problem.d)]
    probe_points += [x_star + u for u in directions] + [x_star - u for u in directions]
    b_hat2 = max(_heterogeneity_at(problem, point) for point in probe_points)

    logger.info(
        f"Problem constants: L={L:.4g} sigma2={sigma2:.4g} b2={b2:.4g} "
        f"b_hat2>={b_hat2:.4g}"
    )
    return ProblemConstants(
        x_star=x_star,
        f_star=reference.f_star,
        L=L,
        sigma2=sigma2,
        b2=b2,
        b_hat2=b_hat2,
    )


def export_dataset(problem: LogisticProblem, directory: str | Path) -> list[Path]:
    """Write one CSV per node (d feature columns then ``label``) plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = ",".join([f"h{j}" for j in range(problem.d)] + ["label"])
    written = []
    for i in range(problem.n):
        path = directory / f"node_{i:04d}.csv"
        rows = np.column_stack([problem.features[i], problem.labels[i]])
        np.savetxt(path, rows, delimiter=",", fmt="%.17g", header=header, comments="")
        written.append(path)
    np.savetxt(
        directory / "planted.csv", problem.planted_params, delimiter=",", fmt="%.17g"
    )
    manifest = {
        "n": problem.n,
        "M": problem.M,
        "d": problem.d,
        "heterogeneity": str(problem.heterogeneity),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info(f"Exported dataset of {problem.n} nodes to {directory}")
    return written


def import_dataset(directory: str | Path) -> LogisticProblem:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    n, M, d = manifest["n"], manifest["M"], manifest["d"]
    blocks = [
        np.loadtxt(directory / f"node_{i:04d}.csv", delimiter=",", skiprows=1, ndmin=2)
        for i in range(n)
    ]
    data = np.stack(blocks)
    planted = np.loadtxt(directory / "planted.csv", delimiter=",", ndmin=2)
    return LogisticProblem(
        n=n,
        M=M,
        d=d,
        features=data[:, :, :d],
        labels=data[:, :, d],
        planted_params=planted.reshape(n, d),
        heterogeneity=Heterogeneity(manifest["heterogeneity"]),
    )
