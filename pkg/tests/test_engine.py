"""Tests for the iteration engine and its algorithm reductions."""

import logging
import math

import numpy as np
import pytest

from gossip_pga.engine import (
    WorkerState,
    aga_update,
    global_average,
    init_state,
    iteration_cost,
    load_checkpoint,
    run,
    save_checkpoint,
    step,
    step_size_at,
    theoretical_period_schedule,
    warmup_iters,
)
from gossip_pga.errors import DivergenceError, DomainError, UnsupportedScheduleError
from gossip_pga.metrics import consensus_sq
from gossip_pga.models import CommModel, RunConfig, Variant
from gossip_pga.problem import (
    Heterogeneity,
    LogisticProblem,
    generate,
    sample_batches,
    solve_reference,
)
from gossip_pga.topology import build_topology


@pytest.fixture(scope="module")
def problem():
    return generate(8, 50, 10, Heterogeneity.NON_IID, seed=3)


@pytest.fixture(scope="module")
def reference(problem):
    return solve_reference(problem)


def constant(gamma: float) -> dict:
    return {"kind": "constant", "gamma": gamma}


def trajectory(problem, reference, kind, **config):
    config.setdefault("T", 60)
    config.setdefault("step_schedule", constant(0.05))
    return run(
        problem,
        build_topology(kind, problem.n),
        RunConfig(**config),
        log_interval=1,
        reference=reference,
    )


def test_step_size_schedules():
    """Halving applies from k = every onwards."""
    halving = RunConfig(variant="gossip", T=10, step_schedule={"kind": "halving"})
    assert step_size_at(halving, 2500) == pytest.approx(0.05)
    assert step_size_at(halving, 999) == 0.2
    assert step_size_at(halving, 1000) == 0.1
    fixed = RunConfig(variant="gossip", T=10, step_schedule=constant(0.3))
    assert step_size_at(fixed, 0) == step_size_at(fixed, 12345) == 0.3


def test_unresolved_theorem1_step():
    """theorem1 steps must be resolved before running."""
    config = RunConfig(variant="gossip", T=10, step_schedule={"kind": "theorem1"})
    with pytest.raises(UnsupportedScheduleError):
        step_size_at(config, 0)


def test_theoretical_period_schedule():
    """H = ceil((F0 / F)^(1/4) H0)."""
    assert theoretical_period_schedule(16.0, 1.0, 3) == 6
    assert theoretical_period_schedule(2.0, 2.0, 5) == 5
    assert theoretical_period_schedule(5.0, 1.0, 4) == 6
    with pytest.raises(DomainError):
        theoretical_period_schedule(0.0, 1.0, 4)


def test_aga_update_rules():
    """Warm-up averages the loss, afterwards the period follows the loss ratio."""
    config = RunConfig(variant="gossip_aga", T=100, aga={"H_init": 4, "warmup_iters": 10})
    state = WorkerState(x=np.zeros((2, 2)), current_H=4.0, f_init=0.0, period_counter=4)
    aga_update(state, 3.0, config, k=5)
    assert state.f_init == 1.5
    assert state.current_H == 4.0
    assert state.period_counter == 0

    state.f_init = 2.0
    aga_update(state, 1.0, config, k=20)
    assert state.current_H == 8.0
    aga_update(state, 2.0, config, k=30)
    assert state.current_H == 4.0


def test_aga_update_clamps_nonpositive_loss(caplog):
    """A zero loss is clamped with a warning."""
    config = RunConfig(variant="gossip_aga", T=100, aga={"warmup_iters": 0})
    state = WorkerState(x=np.zeros((2, 2)), current_H=4.0, f_init=1.0)
    with caplog.at_level(logging.WARNING):
        aga_update(state, 0.0, config, k=1)
    assert "clamped" in caplog.text
    assert math.isfinite(state.current_H)
    assert state.current_H > 4


def test_aga_period_non_decreasing_for_falling_losses():
    """Non-increasing sync losses never shrink the period."""
    config = RunConfig(variant="gossip_aga", T=100, aga={"H_init": 4, "warmup_iters": 2})
    state = WorkerState(x=np.zeros((2, 2)), current_H=4.0)
    periods = []
    for k, loss in enumerate([1.0, 0.9, 0.8, 0.8, 0.5, 0.3, 0.3, 0.1]):
        aga_update(state, loss, config, k=k)
        periods.append(state.current_H)
    assert periods == sorted(periods)


def test_warmup_default_is_first_phase():
    """K_w defaults to the first learning-rate phase."""
    halving = RunConfig(variant="gossip_aga", T=5000, step_schedule={"kind": "halving", "every": 700})
    assert warmup_iters(halving) == 700
    fixed = RunConfig(variant="gossip_aga", T=95, step_schedule=constant(0.1))
    assert warmup_iters(fixed) == 10


def test_global_average_rows_identical():
    """Averaged rows are bit-identical."""
    X = np.random.default_rng(0).standard_normal((7, 3))
    averaged = global_average(X)
    assert np.all(averaged == averaged[0])
    np.testing.assert_allclose(averaged[0], X.mean(axis=0))


def test_sync_iterations_zero_consensus(problem):
    """Every iteration with mod(k+1, H) = 0 leaves the nodes in consensus."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip_pga", T=40, H=4, step_schedule=constant(0.05))
    state = init_state(problem, config, seed=1)
    for k in range(config.T):
        step(state, problem, topology, config, k)
        if (k + 1) % 4 == 0:
            assert state.synced
            assert consensus_sq(state) == 0.0
        else:
            assert consensus_sq(state) > 0.0


def test_average_preservation(problem):
    """Every branch moves x_bar by exactly -gamma times the mean gradient."""
    topology = build_topology("grid", problem.n)
    gamma = 0.05
    for variant in ("gossip", "gossip_pga", "local", "parallel", "gossip_aga"):
        config = RunConfig(variant=variant, T=30, H=3, step_schedule=constant(gamma))
        state = init_state(problem, config, seed=2)
        shadow = init_state(problem, config, seed=2)
        for k in range(config.T):
            before = state.mean
            grads, _ = sample_batches(problem, state.x, 1, shadow.streams)
            step(state, problem, topology, config, k)
            expected = before - gamma * grads.mean(axis=0)
            assert np.linalg.norm(state.mean - expected) <= 1e-12 * max(np.linalg.norm(expected), 1.0)


def test_zero_step_keeps_parameters(problem):
    """gamma = 0 never moves the iterates."""
    config = RunConfig(variant="gossip", T=10, step_schedule=constant(0.0), init=[0.5] * problem.d)
    state = init_state(problem, config)
    for k in range(config.T):
        step(state, problem, build_topology("ring", problem.n), config, k)
    assert np.all(state.x == 0.5)


def test_running_average(problem):
    """x_hat after T iterations is the mean of x_bar over k = 0..T."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip", T=12, step_schedule=constant(0.1))
    state = init_state(problem, config)
    means = [state.mean]
    for k in range(config.T):
        step(state, problem, topology, config, k)
        means.append(state.mean)
    np.testing.assert_allclose(state.running_avg, np.mean(means, axis=0), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_large_period_reduces_to_gossip(problem, reference, seed):
    """Gossip-PGA with H > T is Gossip SGD."""
    pga = trajectory(problem, reference, "ring", variant="gossip_pga", H=61, seed=seed)
    gossip = trajectory(problem, reference, "ring", variant="gossip", seed=seed)
    np.testing.assert_array_equal(pga.metric_array(), gossip.metric_array())


@pytest.mark.parametrize("seed", range(10))
def test_identity_weights_reduce_to_local(problem, reference, seed):
    """Gossip-PGA with W = I is Local SGD."""
    pga = trajectory(problem, reference, "disconnected_identity", variant="gossip_pga", H=5, seed=seed)
    local = trajectory(problem, reference, "ring", variant="local", H=5, seed=seed)
    np.testing.assert_array_equal(pga.metric_array(), local.metric_array())


@pytest.mark.parametrize("seed", range(10))
def test_averaging_weights_reduce_to_parallel(problem, reference, seed):
    """Gossip-PGA with W = J/n, or with H = 1, is Parallel SGD."""
    parallel = trajectory(problem, reference, "ring", variant="parallel", seed=seed)
    full = trajectory(problem, reference, "fully_connected", variant="gossip_pga", H=6, seed=seed)
    every = trajectory(problem, reference, "ring", variant="gossip_pga", H=1, seed=seed)
    np.testing.assert_array_equal(full.metric_array(), parallel.metric_array())
    np.testing.assert_array_equal(every.metric_array(), parallel.metric_array())


def test_single_node_variants_identical():
    """With one node no variant communicates."""
    single = generate(1, 200, 4, seed=5)
    reference = solve_reference(single)
    arrays = [
        trajectory(single, reference, "fully_connected", variant=variant, H=3, seed=9).metric_array()
        for variant in Variant
    ]
    for array in arrays[1:]:
        np.testing.assert_array_equal(array, arrays[0])


def test_noiseless_identical_data_never_breaks_consensus():
    """Full batch, identical local datasets and a common start keep all variants equal."""
    base = generate(1, 200, 4, seed=8)
    n = 6
    tiled = LogisticProblem(
        n=n,
        M=base.M,
        d=base.d,
        features=np.repeat(base.features, n, axis=0),
        labels=np.repeat(base.labels, n, axis=0),
        planted_params=np.repeat(base.planted_params, n, axis=0),
        heterogeneity=Heterogeneity.IID,
    )
    reference = solve_reference(tiled)
    arrays = [
        trajectory(tiled, reference, "ring", variant=variant, H=4, full_batch=True).metric_array()
        for variant in ("gossip", "gossip_pga", "local", "parallel")
    ]
    for array in arrays:
        assert np.all(array[:, 1] == 0.0)
        np.testing.assert_array_equal(array, arrays[0])


def test_run_logging_grid(problem, reference):
    """Records sit at k = 0, every log_interval and at k = T."""
    config = RunConfig(variant="parallel", T=10, step_schedule=constant(0.05))
    topology = build_topology("ring", problem.n)
    result = run(problem, topology, config, log_interval=1, reference=reference)
    assert len(result.records) == 11
    result = run(problem, topology, config.model_copy(update={"T": 25}), log_interval=10, reference=reference)
    assert list(result.iters) == [0, 10, 20, 25]


def test_run_is_deterministic(problem, reference):
    """Same seed and trial give identical trajectories; trials differ."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip_aga", T=50, step_schedule=constant(0.05), seed=4)
    a = run(problem, topology, config, reference=reference, trial=2)
    b = run(problem, topology, config, reference=reference, trial=2)
    c = run(problem, topology, config, reference=reference, trial=3)
    np.testing.assert_array_equal(a.metric_array(), b.metric_array())
    assert not np.array_equal(a.metric_array(), c.metric_array())


def test_run_records_sync_events(problem, reference):
    """Sync events carry the period in force."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip_pga", T=20, H=5, step_schedule=constant(0.05))
    result = run(problem, topology, config, reference=reference)
    assert [event.iter for event in result.sync_log] == [4, 9, 14, 19]
    assert result.realized_h_max == 5
    assert result.sync_fraction == pytest.approx(0.2)


def test_run_gap_is_nonnegative(problem, reference):
    """Gaps are measured against f*."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip_pga", T=30, H=4, step_schedule=constant(0.05))
    result = run(problem, topology, config, reference=reference)
    assert np.all(result.column("gap") >= -1e-12)
    assert result.records[0].gap == pytest.approx(math.log(2) - reference.f_star)


def test_divergence_carries_trajectory(problem, reference):
    """Non-finite parameters stop the run with the partial trajectory."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip", T=10, step_schedule=constant(0.1), init=[math.nan] * problem.d)
    with pytest.raises(DivergenceError) as excinfo:
        run(problem, topology, config, reference=reference)
    assert excinfo.value.iteration == 0
    assert len(excinfo.value.trajectory.records) == 1


def test_model_time_accumulates(problem, reference):
    """Modeled time charges gossip rounds and All-Reduce steps."""
    comm = CommModel(alpha=2.0, theta=1.0, d=10, n=problem.n, degree=3)
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip_pga", T=8, H=4, step_schedule=constant(0.05))
    result = run(problem, topology, config, log_interval=8, reference=reference, comm_model=comm)
    allreduce = 2 * 10 + problem.n * 2.0
    gossip = 3 * 10 + 2.0
    assert result.records[-1].model_time == pytest.approx(6 * gossip + 2 * allreduce)
    assert iteration_cost(topology, comm, RunConfig(variant="local", T=1, H=2), False) == 0.0


def test_checkpoint_round_trip(tmp_path, problem):
    """A saved state restores to the same iterate and bookkeeping."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip_aga", T=10, step_schedule=constant(0.05))
    state = init_state(problem, config)
    for k in range(7):
        step(state, problem, topology, config, k)
    restored = load_checkpoint(save_checkpoint(state, tmp_path / "state.csv"))
    np.testing.assert_array_equal(restored.x, state.x)
    np.testing.assert_array_equal(restored.running_sum, state.running_sum)
    assert restored.iter == 7
    assert restored.current_H == state.current_H
    assert restored.period_counter == state.period_counter
    assert len(restored.streams) == problem.n


def test_checkpoint_resumes_run_exactly(tmp_path, problem):
    """Stepping a restored state reproduces the uninterrupted run bit for bit."""
    topology = build_topology("ring", problem.n)
    config = RunConfig(variant="gossip_aga", T=20, aga={"H_init": 2, "warmup_iters": 4})
    state = init_state(problem, config, seed=5)
    for k in range(9):
        step(state, problem, topology, config, k)
    restored = load_checkpoint(save_checkpoint(state, tmp_path / "state.csv"))

    for k in range(9, 20):
        step(state, problem, topology, config, k)
        step(restored, problem, topology, config, k)
    np.testing.assert_array_equal(restored.x, state.x)
    np.testing.assert_array_equal(restored.running_sum, state.running_sum)
    assert restored.current_H == state.current_H
