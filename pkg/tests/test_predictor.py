import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcbf.barrier import constant_controller, halfspace_barrier, safety_filter
from pcbf.dynamics import make_double_integrator
from pcbf.errors import ConfigError
from pcbf.predictor import (INFEASIBLE, OptimizedDelta, PredictorConfig, RealtimeDelta, delta_update,
                            optimize_delta, optimize_delta_many, realtime_step, resolve_threads, rollout_batch,
                            rollout_margin, simulate, simulate_many, tabulate_delta)

CFG = PredictorConfig()


def test_config_validation():
    for kw in ({"horizon_T": 0.0}, {"eta": -1.0}, {"max_iters": 0}, {"tol": 0.0}, {"delta_cap": 0.0},
               {"violation_rate": "beta"}, {"violation_rate": -1.0}):
        with pytest.raises(ConfigError):
            PredictorConfig(**kw)
    b = halfspace_barrier(1.0, 2.0)
    assert PredictorConfig(violation_rate="alpha_x").rate(b) == 2.0
    assert PredictorConfig(violation_rate=0.5).rate(b) == 0.5
    assert CFG.n_steps == 200


def test_update_rule_arithmetic():
    d1 = delta_update(0.0, -0.3, 1.0)
    assert d1 == pytest.approx(0.3)
    assert delta_update(d1, 0.2, 1.0) == pytest.approx(0.1)
    assert delta_update(0.05, 0.2, 1.0) == 0.0


def test_rollout_margin_safe_start_with_fast_tracking():
    sys, b, k = make_double_integrator(1, 20.0), halfspace_barrier(1.0, 2.0), constant_controller(-0.5)
    res = rollout_margin(sys, b, k, np.array([2.0, 0.0]), 0.0, CFG)
    assert res.margin_e >= 0
    assert 0.0 <= res.worst_time <= CFG.horizon_T
    assert res.margin_e == pytest.approx(np.min(res.trajectory.hdot + b.alpha * res.trajectory.h))


def test_rollout_margin_unsafe_start(scalar):
    sys, b, k = scalar
    res = rollout_margin(sys, b, k, np.array([-1.0, 0.0]), 0.0, CFG)
    assert res.margin_e <= -b.alpha
    assert res.min_h <= -1.0


def test_rollout_margin_single_sample(scalar):
    sys, b, k = scalar
    cfg = PredictorConfig(horizon_T=1e-3)
    assert cfg.n_steps == 0
    x0 = np.array([0.7, -0.4])
    res = rollout_margin(sys, b, k, x0, 0.0, cfg)
    assert len(res.trajectory) == 1
    assert res.margin_e == pytest.approx(x0[1] + b.alpha * x0[0])


def test_rollout_batch_matches_single(scalar, rng):
    sys, b, k = scalar
    X = rng.uniform([0, -2], [3, 2], size=(6, 2))
    d = rng.uniform(0, 1, size=6)
    batch = rollout_batch(sys, b, k, X, d, 150, 1e-2, 1.0)
    for i in range(6):
        single = rollout_margin(sys, b, k, X[i], d[i], PredictorConfig(horizon_T=1.5))
        assert batch.margin[i] == pytest.approx(single.margin_e, abs=1e-12)


def test_simulate_many_matches_simulate(scalar):
    sys, b, k = scalar
    X = np.array([[1.0, -0.5], [2.0, 0.3]])
    many = simulate_many(sys, b, k, X, 0.4, 2.0)
    for x, tr in zip(X, many):
        np.testing.assert_allclose(tr.states, simulate(sys, b, k, x, 0.4, 2.0).states, atol=1e-12)


def test_optimize_delta_interior_returns_zero_in_one_iteration():
    sys, b, k = make_double_integrator(1, 20.0), halfspace_barrier(1.0, 2.0), constant_controller(-0.5)
    out = optimize_delta(sys, b, k, np.array([2.0, 0.0]), CFG)
    assert out.delta == 0.0 and out.iterations == 1 and out.converged


def _margins_over_delta_grid(sys, b, k, x0, deltas, cfg):
    X = np.repeat(x0[None], len(deltas), axis=0)
    ro = rollout_batch(sys, b, k, X, deltas, cfg.n_steps, cfg.dt, cfg.rate(b))
    return ro.margin


def test_infeasible_state_cross_checked_by_delta_grid(scalar):
    sys, b, k = scalar
    x0 = np.array([0.1, -3.0])
    out = optimize_delta(sys, b, k, x0, CFG)
    assert out.delta == INFEASIBLE and not out.feasible
    margins = _margins_over_delta_grid(sys, b, k, x0, np.linspace(0, CFG.delta_cap, 201), CFG)
    assert np.all(margins < -CFG.tol)


def test_finite_delta_cross_checked_by_delta_grid(scalar):
    sys, b, k = scalar
    x0 = np.array([1.5, -1.0])
    out = optimize_delta(sys, b, k, x0, CFG)
    assert out.feasible and out.delta > 0
    grid = np.linspace(0, 2, 2001)
    margins = _margins_over_delta_grid(sys, b, k, x0, grid, CFG)
    smallest_ok = grid[np.argmax(margins >= -CFG.tol)]
    assert abs(out.delta - smallest_ok) <= 2e-3


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 4.0), st.floats(-4.0, 4.0))
def test_converged_outcomes_are_self_consistent(x1, x2):
    sys, b, k = make_double_integrator(1, 1.0), halfspace_barrier(1.0, 2.0), constant_controller(-0.5)
    out = optimize_delta(sys, b, k, np.array([x1, x2]), CFG)
    if out.feasible:
        assert out.delta >= 0
        res = rollout_margin(sys, b, k, np.array([x1, x2]), out.delta, CFG)
        assert res.margin_e >= -CFG.tol


def test_delta_monotone_in_approach_speed(scalar):
    sys, b, k = scalar
    x2 = np.linspace(1.0, -4.0, 41)
    X = np.column_stack([np.full_like(x2, 1.5), x2])
    d = np.array([o.delta for o in optimize_delta_many(sys, b, k, X, CFG)])
    fin = np.isfinite(d)
    first_inf = np.argmin(fin) if not fin.all() else len(d)
    assert np.all(fin[:first_inf]) and not np.any(fin[first_inf:])
    assert np.all(np.diff(d[:first_inf]) >= -CFG.tol)


def test_realtime_step_converges_to_optimizer(scalar):
    sys, b, k = scalar
    x = np.array([1.5, -1.0])
    target = optimize_delta(sys, b, k, x, CFG).delta
    est = 0.0
    for _ in range(300):
        _, est = realtime_step(est, sys, b, k, x, CFG)
    assert abs(est - target) <= 2 * CFG.tol


def test_realtime_step_sign_rules():
    sys, b, k = make_double_integrator(1, 20.0), halfspace_barrier(1.0, 2.0), constant_controller(-0.5)
    x = np.array([2.0, 0.0])
    v, est = realtime_step(0.0, sys, b, k, x, CFG)
    assert est == 0.0
    np.testing.assert_array_equal(v, safety_filter(b, sys.rom, x[:1], k, 0.0).v)
    _, est2 = realtime_step(0.7, sys, b, k, x, CFG)
    assert est2 <= 0.7
    with pytest.raises(ValueError):
        realtime_step(-1.0, sys, b, k, x, CFG)


def test_delta_providers(scalar):
    sys, b, k = scalar
    x0 = np.array([1.5, -1.0])
    opt = OptimizedDelta(sys, b, k, CFG, warm_start=True)
    tr = simulate(sys, b, k, x0, opt, 3.0, delta_period=10)
    assert tr.h.min() >= -1e-6 and opt.n_calls >= 30 and tr.deltas.max() > 0 and opt.n_infeasible == 0
    rt = RealtimeDelta(sys, b, k, CFG)
    tr = simulate(sys, b, k, x0, rt, 3.0)
    assert np.all(tr.deltas >= 0) and rt.estimate >= 0


def test_tabulate_single_node_matches_optimize(scalar):
    sys, b, k = scalar
    table = tabulate_delta(sys, b, k, [[1.2], [-0.8]], CFG)
    assert table.outcomes[0] == optimize_delta(sys, b, k, np.array([1.2, -0.8]), CFG)


def test_tabulate_order_independent_of_threads(scalar, tmp_path):
    sys, b, k = scalar
    axes = [np.linspace(0, 2, 5), np.linspace(-3, 1, 7)]
    one = tabulate_delta(sys, b, k, axes, CFG, threads=1, chunk=4)
    many = tabulate_delta(sys, b, k, axes, CFG, threads=3, chunk=4)
    assert one.outcomes == many.outcomes
    np.testing.assert_array_equal(one.nodes[1], [0.0, -3 + 4 / 6])
    assert one.grid_deltas().shape == (5, 7)
    one.to_csv(tmp_path / "a.csv")
    many.to_csv(tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    assert text.splitlines()[0] == "x_0,x_1,delta,iterations,converged,final_margin"
    assert ",inf," in text


def test_tabulate_symmetric_under_mirror(obstacle):
    sys, b, k = obstacle
    pts = np.array([[-4.0, 0.4, 0.5, -0.1], [-3.8, 0.9, 0.6, -0.2], [-4.5, 0.2, 0.3, 0.1]])
    mirror = pts * np.array([1, -1, 1, -1])
    a = [o.delta for o in optimize_delta_many(sys, b, k, pts, CFG)]
    m = [o.delta for o in optimize_delta_many(sys, b, k, mirror, CFG)]
    np.testing.assert_allclose(a, m, atol=1e-9)
    assert max(a) > 0


def test_tabulate_validation(scalar):
    sys, b, k = scalar
    with pytest.raises(ConfigError):
        tabulate_delta(sys, b, k, [[0.0]], CFG)
    with pytest.raises(ConfigError):
        tabulate_delta(sys, b, k, [[0.0], [np.nan]], CFG)


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("PCBF_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.delenv("PCBF_THREADS")
    assert resolve_threads(None) == 1
