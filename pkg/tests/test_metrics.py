"""Tests for trajectories, aggregation and transient detection."""

import csv
import logging

import numpy as np
import pytest

from gossip_pga.errors import GridMismatchError, UnsupportedScheduleError
from gossip_pga.metrics import (
    METRICS,
    TRAJECTORY_COLUMNS,
    MetricRecord,
    Trajectory,
    aggregate,
    consensus_sq,
    consensus_lemma_check,
    detect_transient,
    write_ensemble,
    write_trajectories,
)
from gossip_pga.models import ConstantStep, HalvingStep
from gossip_pga.problem import ProblemConstants


def make_trajectory(gaps, iters=None, consensus=None, **meta) -> Trajectory:
    iters = list(range(len(gaps))) if iters is None else iters
    consensus = [0.0] * len(gaps) if consensus is None else consensus
    trajectory = Trajectory(meta={"n": 4, "variant": "gossip", "topology": "ring", "H": 4, **meta})
    for k, gap, c in zip(iters, gaps, consensus):
        trajectory.append(
            MetricRecord(
                iter=k, consensus_sq=c, gap=gap, avg_gap=gap, grad_sq=0.0, model_time=float(k), current_H=4.0
            )
        )
    return trajectory


def constants(**values) -> ProblemConstants:
    defaults = {"x_star": np.zeros(2), "f_star": 0.0, "L": 1.0, "sigma2": 1.0, "b2": 1.0, "b_hat2": 1.0}
    return ProblemConstants(**{**defaults, **values})


def test_consensus_sq_examples():
    """Equal rows give 0; (1, 0) and (-1, 0) give 2."""
    assert consensus_sq(np.ones((5, 3))) == 0.0
    assert consensus_sq(np.array([[1.0, 0.0], [-1.0, 0.0]])) == 2.0


def test_consensus_sq_matches_double_loop():
    """Vectorized consensus distance equals the naive sum."""
    X = np.random.default_rng(0).standard_normal((6, 4))
    mean = [sum(X[i, j] for i in range(6)) / 6 for j in range(4)]
    naive = sum((X[i, j] - mean[j]) ** 2 for i in range(6) for j in range(4))
    assert consensus_sq(X) == pytest.approx(naive, rel=1e-12)


def test_trajectory_append_validation():
    """Iterations must increase and consensus stays nonnegative."""
    trajectory = make_trajectory([1.0, 0.5])
    with pytest.raises(ValueError):
        trajectory.append(
            MetricRecord(iter=1, consensus_sq=0, gap=0, avg_gap=0, grad_sq=0, model_time=5, current_H=1)
        )
    with pytest.raises(ValueError):
        trajectory.append(
            MetricRecord(iter=9, consensus_sq=-1, gap=0, avg_gap=0, grad_sq=0, model_time=5, current_H=1)
        )


def test_aggregate_single_trajectory():
    """One trajectory is its own mean with zero spread."""
    trajectory = make_trajectory([3.0, 2.0, 1.0])
    ensemble = aggregate([trajectory])
    np.testing.assert_array_equal(ensemble.mean["gap"], [3.0, 2.0, 1.0])
    np.testing.assert_array_equal(ensemble.std["gap"], [0.0, 0.0, 0.0])


def test_aggregate_sample_std():
    """Gaps 1 and 3 average to 2 with sample deviation sqrt(2)."""
    ensemble = aggregate([make_trajectory([1.0]), make_trajectory([3.0])])
    assert ensemble.mean["gap"][0] == 2.0
    assert ensemble.std["gap"][0] == pytest.approx(np.sqrt(2))


def test_aggregate_identical_members_exact():
    """The mean of identical trajectories equals any member exactly."""
    gaps = [0.1, 0.7, 0.30000000000000004]
    ensemble = aggregate([make_trajectory(gaps) for _ in range(3)])
    np.testing.assert_array_equal(ensemble.mean["gap"], gaps)


def test_aggregate_noise_std():
    """Unit-variance noise gives sample deviations near one."""
    rng = np.random.default_rng(1)
    ensemble = aggregate([make_trajectory(list(rng.standard_normal(20))) for _ in range(50)])
    assert np.all((ensemble.std["gap"] > 0.7) & (ensemble.std["gap"] < 1.3))


def test_aggregate_grid_mismatch():
    """Trajectories on different grids cannot be aggregated."""
    with pytest.raises(GridMismatchError):
        aggregate([make_trajectory([1.0, 2.0]), make_trajectory([1.0, 2.0], iters=[0, 5])])


def test_detect_transient_examples():
    """Identical curves match at once; doubled curves never do."""
    reference = aggregate([make_trajectory([1.0] * 100)])
    same = aggregate([make_trajectory([1.0] * 100)])
    double = aggregate([make_trajectory([2.0] * 100)])
    assert detect_transient(same, reference) == 0
    assert detect_transient(double, reference) is None


def test_detect_transient_switch_point():
    """Curves equal from iteration 500 on, 3x before, match at 500."""
    iters = list(range(0, 1000, 10))
    base = [1.0 / (1 + k) for k in iters]
    candidate = [g * (3.0 if k < 500 else 1.0) for g, k in zip(base, iters)]
    result = detect_transient(
        aggregate([make_trajectory(candidate, iters=iters)]),
        aggregate([make_trajectory(base, iters=iters)]),
    )
    assert result == 500


def test_detect_transient_requires_sustained_match():
    """A short excursion below the tolerance does not count."""
    gaps = [3.0] * 20 + [1.0] * 5 + [3.0] * 20 + [1.0] * 60
    result = detect_transient(
        aggregate([make_trajectory(gaps)]), aggregate([make_trajectory([1.0] * len(gaps))]), window=10
    )
    assert result == 45


def test_detect_transient_monotone_in_tolerance():
    """A larger tolerance never detects a later iteration."""
    rng = np.random.default_rng(4)
    reference = aggregate([make_trajectory(list(np.linspace(1, 0.1, 200)))])
    candidate = aggregate([make_trajectory(list(np.linspace(1, 0.1, 200) * (1 + rng.uniform(0, 0.2, 200))))])
    previous = None
    for tol in (0.0, 0.05, 0.1, 0.15, 0.25):
        k0 = detect_transient(candidate, reference, rel_tol=tol, window=20)
        if previous is not None:
            assert k0 is not None and k0 <= previous
        previous = k0 if k0 is not None else previous


def test_detect_transient_grid_mismatch():
    """Candidate and reference must share the grid."""
    with pytest.raises(GridMismatchError):
        detect_transient(
            aggregate([make_trajectory([1.0, 2.0])]),
            aggregate([make_trajectory([1.0, 2.0], iters=[0, 3])]),
        )


def test_consensus_lemma_trivial_cases():
    """beta = 0 and gamma = 0 give zero on both sides."""
    ensemble = aggregate([make_trajectory([0.5, 0.4, 0.3])])
    report = consensus_lemma_check(ensemble, constants(), ConstantStep(gamma=0.1), 4, 0.0)
    assert report.rhs == 0.0 and report.lhs == 0.0 and report.passed
    report = consensus_lemma_check(ensemble, constants(), ConstantStep(gamma=0.0), 4, 0.9)
    assert report.rhs == 0.0 and report.passed
    assert report.trials == 1


def test_consensus_lemma_detects_violation():
    """Large consensus distances fail the check."""
    ensemble = aggregate([make_trajectory([0.1, 0.1], consensus=[100.0, 100.0])])
    report = consensus_lemma_check(ensemble, constants(), ConstantStep(gamma=0.001), 4, 0.5)
    assert not report.passed
    assert report.lhs == 100.0


def test_consensus_lemma_requires_constant_step():
    """Decaying schedules are outside the lemma's setting."""
    ensemble = aggregate([make_trajectory([0.5])])
    with pytest.raises(UnsupportedScheduleError):
        consensus_lemma_check(ensemble, constants(), HalvingStep(), 4, 0.5)


def test_consensus_lemma_flags_grid_on_sync_points(caplog):
    """A grid logged every H iterations only sees post-average zeros."""
    synced = aggregate([make_trajectory([0.3, 0.2, 0.1, 0.1], iters=[0, 4, 8, 10])])
    with caplog.at_level(logging.WARNING):
        report = consensus_lemma_check(synced, constants(), ConstantStep(gamma=0.001), 4, 0.5)
    assert report.sync_aligned
    assert "log every iteration" in caplog.text

    dense = aggregate([make_trajectory([0.3, 0.2, 0.1, 0.1])])
    report = consensus_lemma_check(dense, constants(), ConstantStep(gamma=0.001), 4, 0.5)
    assert not report.sync_aligned


def test_write_csv_files(tmp_path):
    """Trajectory and ensemble CSVs carry the documented columns."""
    trajectories = [make_trajectory([2.0, 1.0], trial=t) for t in range(2)]
    path = write_trajectories(tmp_path / "t.csv", trajectories)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0].keys()) == TRAJECTORY_COLUMNS
    assert [row["trial"] for row in rows] == ["0", "0", "1", "1"]

    path = write_ensemble(tmp_path / "e.csv", aggregate(trajectories))
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert rows[0]["trials"] == "2"
    for name in METRICS:
        assert f"{name}_mean" in rows[0] and f"{name}_std" in rows[0]
