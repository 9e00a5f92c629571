"""Network topologies, mixing matrices and their spectral constants."""

import logging
import math
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import networkx as nx
import numpy as np
from scipy import linalg

from .errors import InvalidPeriodError, InvalidTopologyError, UnsupportedTopologyError

logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12


class TopologyKind(StrEnum):
    RING = "ring"
    GRID = "grid"
    STATIC_EXPONENTIAL = "static_exponential"
    ONE_PEER_EXPONENTIAL = "one_peer_exponential"
    FULLY_CONNECTED = "fully_connected"
    DISCONNECTED_IDENTITY = "disconnected_identity"


@dataclass(frozen=True, eq=False)
class Topology:
    """A network of ``n`` nodes with static or per-iteration mixing weights.

    ``static_weights`` is set for every kind except the one-peer exponential
    graph, whose weights are produced by :meth:`weights_at`.
    """

    n: int
    kind: TopologyKind
    static_weights: np.ndarray | None = None
    schedule_period: int | None = None

    @property
    def is_time_varying(self) -> bool:
        return self.static_weights is None

    @property
    def degree(self) -> int:
        """Largest neighborhood size |N_i| (self included)."""
        if self.kind == TopologyKind.ONE_PEER_EXPONENTIAL:
            return 1 if self.n == 1 else 2
        return int(np.max(np.count_nonzero(self.static_weights, axis=1)))

    def weights_at(self, k: int) -> np.ndarray:
        """Mixing matrix used at iteration ``k``."""
        if self.static_weights is not None:
            return self.static_weights
        return _one_peer_weights(self.n, k, self.schedule_period or 0)

    def neighbors(self, i: int, k: int = 0) -> list[int]:
        """Neighbor set N_i at iteration ``k``, node ``i`` itself included."""
        return [int(j) for j in np.flatnonzero(self.weights_at(k)[i])]


@dataclass(frozen=True)
class MixingConstants:
    beta: float
    c_beta: float
    d_beta: float
    period: float


def _freeze(weights: np.ndarray) -> np.ndarray:
    weights = np.ascontiguousarray(weights, dtype=float)
    weights.setflags(write=False)
    return weights


def metropolis_hastings_weights(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric doubly stochastic weights w_ij = 1/max(|N_i|, |N_j|).

    ``adjacency`` has no self loops; |N_i| counts node ``i`` itself.
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    sizes = adjacency.sum(axis=1) + 1
    weights = np.where(
        adjacency, 1.0 / np.maximum(sizes[:, None], sizes[None, :]), 0.0
    )
    np.fill_diagonal(weights, 0.0)
    np.fill_diagonal(weights, 1.0 - weights.sum(axis=1))
    return weights


def build_ring(n: int) -> Topology:
    if n < 3:
        raise InvalidTopologyError(f"Ring topology requires n >= 3, got {n}")
    adjacency = nx.to_numpy_array(nx.cycle_graph(n), nodelist=range(n))
    weights = np.where(adjacency > 0, 1.0 / 3.0, 0.0)
    np.fill_diagonal(weights, 1.0 / 3.0)
    return Topology(n=n, kind=TopologyKind.RING, static_weights=_freeze(weights))


def build_grid(rows: int, cols: int) -> Topology:
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise InvalidTopologyError(
            f"Grid topology requires rows*cols >= 2, got {rows}x{cols}"
        )
    graph = nx.grid_2d_graph(rows, cols)
    order = [(r, c) for r in range(rows) for c in range(cols)]
    adjacency = nx.to_numpy_array(graph, nodelist=order)
    weights = metropolis_hastings_weights(adjacency)
    return Topology(
        n=rows * cols, kind=TopologyKind.GRID, static_weights=_freeze(weights)
    )


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def build_static_exponential(n: int) -> Topology:
    """Node i links to (i + 2^j) mod n for j = 0..ceil(log2 n)-1.

    Power-of-two sizes keep the directed uniform weights 1/|N_i|, which are
    already doubly stochastic; other sizes use the symmetrized graph with
    Metropolis-Hastings weights.
    """
    if n < 2:
        raise InvalidTopologyError(f"Exponential topology requires n >= 2, got {n}")
    hops = math.ceil(math.log2(n))
    if _is_power_of_two(n):
        weights = np.zeros((n, n))
        for i in range(n):
            peers = {i} | {(i + 2**j) % n for j in range(hops)}
            weights[i, sorted(peers)] = 1.0 / len(peers)
    else:
        adjacency = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(hops):
                peer = (i + 2**j) % n
                if peer != i:
                    adjacency[i, peer] = adjacency[peer, i] = True
        weights = metropolis_hastings_weights(adjacency)
    return Topology(
        n=n, kind=TopologyKind.STATIC_EXPONENTIAL, static_weights=_freeze(weights)
    )


def build_one_peer_exponential(n: int) -> Topology:
    if not _is_power_of_two(n):
        raise UnsupportedTopologyError(
            f"One-peer exponential graph requires a power-of-two n, got {n}"
        )
    return Topology(
        n=n,
        kind=TopologyKind.ONE_PEER_EXPONENTIAL,
        schedule_period=int(math.log2(n)),
    )


def _one_peer_weights(n: int, k: int, period: int) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    hop = 2 ** (k % period)
    weights = np.zeros((n, n))
    nodes = np.arange(n)
    weights[nodes, nodes] = 0.5
    weights[nodes, (nodes + hop) % n] += 0.5
    return weights


def build_fully_connected(n: int) -> Topology:
    if n < 1:
        raise InvalidTopologyError(f"Topology requires n >= 1, got {n}")
    weights = np.full((n, n), 1.0 / n)
    return Topology(
        n=n, kind=TopologyKind.FULLY_CONNECTED, static_weights=_freeze(weights)
    )


def build_identity(n: int) -> Topology:
    if n < 1:
        raise InvalidTopologyError(f"Topology requires n >= 1, got {n}")
    return Topology(
        n=n,
        kind=TopologyKind.DISCONNECTED_IDENTITY,
        static_weights=_freeze(np.eye(n)),
    )


def square_factors(n: int) -> tuple[int, int]:
    """Most square (rows, cols) factorization of ``n`` with rows <= cols."""
    rows = math.isqrt(n)
    while rows > 1 and n % rows:
        rows -= 1
    return rows, n // rows


def build_topology(
    kind: TopologyKind | str,
    n: int,
    rows: int | None = None,
    cols: int | None = None,
) -> Topology:
    """Build a topology by kind name, as selected from a config file."""
    kind = TopologyKind(kind)
    match kind:
        case TopologyKind.RING:
            return build_ring(n)
        case TopologyKind.GRID:
            if rows is None or cols is None:
                rows, cols = square_factors(n)
            if rows * cols != n:
                raise InvalidTopologyError(
                    f"Grid {rows}x{cols} does not have {n} nodes"
                )
            return build_grid(rows, cols)
        case TopologyKind.STATIC_EXPONENTIAL:
            return build_static_exponential(n)
        case TopologyKind.ONE_PEER_EXPONENTIAL:
            return build_one_peer_exponential(n)
        case TopologyKind.FULLY_CONNECTED:
            return build_fully_connected(n)
        case TopologyKind.DISCONNECTED_IDENTITY:
            return build_identity(n)


def beta(topology: Topology) -> float:
    """Spectral norm of W - (1/n) 11^T, clipped to [0, 1]."""
    if topology.is_time_varying:
        raise UnsupportedTopologyError(
            f"beta is not defined for time-varying topology {topology.kind}"
        )
    weights = topology.static_weights
    n = topology.n
    deviation = weights - np.full((n, n), 1.0 / n)
    if not deviation.any():
        return 0.0
    if np.array_equal(weights, weights.T):
        eigenvalues = linalg.eigh(deviation, eigvals_only=True)
        value = float(np.max(np.abs(eigenvalues)))
    else:
        value = float(np.linalg.norm(deviation, 2))
    return min(max(value, 0.0), 1.0)


def mixing_constants(beta: float, H: float) -> MixingConstants:
    """C_beta = sum_{k<H} beta^k and D_beta = min{H, 1/(1-beta)}.

    ``H`` may be ``math.inf`` (no global averaging). C_beta is clamped by
    both H and 1/(1-beta) so the ordering C_beta <= D_beta holds in floating
    point as it does exactly.
    """
    if H < 1:
        raise InvalidPeriodError(f"Averaging period must be >= 1, got {H}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta >= 1.0:
        return MixingConstants(beta=beta, c_beta=H, d_beta=H, period=H)
    inverse_gap = 1.0 / (1.0 - beta)
    geometric = (1.0 - beta**H) / (1.0 - beta)
    c_beta = min(geometric, inverse_gap, H)
    d_beta = min(H, inverse_gap)
    return MixingConstants(beta=beta, c_beta=c_beta, d_beta=d_beta, period=H)


def stochasticity_violations(
    weights: np.ndarray, tol: float = STOCHASTIC_TOL
) -> list[str]:
    """Describe every way ``weights`` fails to be doubly stochastic."""
    weights = np.asarray(weights, dtype=float)
    problems = []
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
        return [f"matrix is not square: shape {weights.shape}"]
    if np.any(weights < 0):
        problems.append(f"negative entry {weights.min():.3g}")
    row_error = np.max(np.abs(weights.sum(axis=1) - 1.0))
    if row_error > tol:
        problems.append(f"row sums deviate from 1 by {row_error:.3g}")
    col_error = np.max(np.abs(weights.sum(axis=0) - 1.0))
    if col_error > tol:
        problems.append(f"column sums deviate from 1 by {col_error:.3g}")
    return problems


def export_weights(topology: Topology, path: str | Path, k: int = 0) -> Path:
    """Write the mixing matrix at iteration ``k`` as full-precision CSV."""
    path = Path(path)
    np.savetxt(path, topology.weights_at(k), delimiter=",", fmt="%.17g")
    logger.info(f"Wrote {topology.kind} weights (n={topology.n}) to {path}")
    return path
