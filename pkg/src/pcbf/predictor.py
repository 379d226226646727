"""Rollout-based computation of the predictive buffer delta(x).

delta is found by the proportional iteration

    delta_{i+1} = max(0, delta_i - eta * e(delta_i)),   delta_0 = 0,

where e(delta) is the worst value of hdot + rate * h over a closed-loop FoM
rollout of length T driven by the delta-buffered RoM filter.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .barrier import BarrierSpec, _solve_filter, lie_derivatives
from .dynamics import DIVERGENCE_NORM, LayeredSystem, Trajectory, project_state_jacobian, select_batch
from .errors import ConfigError, DivergenceError, InfeasibleFilterError

log = logging.getLogger(__name__)

INFEASIBLE = math.inf


@dataclass(frozen=True)
class PredictorConfig:
    horizon_T: float = 2.0
    eta: float = 1.0
    max_iters: int = 100
    dt: float = 1e-2
    tol: float = 1e-3
    delta_cap: float = 5.0
    # "alpha", "alpha_x" or a number
    violation_rate: Union[str, float] = "alpha"
    # Under the projection assumption the t=0 barrier rate does not depend on
    # delta, so a violation there can never be repaired by iterating.
    stop_on_initial_violation: bool = True

    def __post_init__(self):
        for name in ("horizon_T", "eta", "dt", "tol", "delta_cap"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if isinstance(self.violation_rate, str):
            if self.violation_rate not in ("alpha", "alpha_x"):
                raise ConfigError(f"unknown violation_rate {self.violation_rate!r}")
        elif not self.violation_rate >= 0:
            raise ConfigError("violation_rate must be >= 0")

    @property
    def n_steps(self):
        return int(round(self.horizon_T / self.dt))

    def rate(self, b: BarrierSpec) -> float:
        if self.violation_rate == "alpha":
            return b.alpha
        if self.violation_rate == "alpha_x":
            return b.alpha_x
        return float(self.violation_rate)


@dataclass
class RolloutResult:
    trajectory: Trajectory
    margin_e: float
    worst_time: float
    min_h: float


@dataclass(frozen=True)
class DeltaOutcome:
    delta: float
    iterations: int
    converged: bool
    final_margin: float

    @property
    def feasible(self):
        return math.isfinite(self.delta)


@dataclass
class BatchRollout:
    """Vectorized rollout output. Per-sample arrays have shape (B,)."""

    margin: np.ndarray
    worst_index: np.ndarray
    min_h: np.ndarray
    failed: np.ndarray
    states: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None
    deltas: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    hdot: Optional[np.ndarray] = None
    margins: Optional[np.ndarray] = None
    fail_step: Optional[np.ndarray] = None
    infeasible_filter: Optional[np.ndarray] = None


def filter_inputs(sys: LayeredSystem, b: BarrierSpec, k_nominal, x, delta):
    """Predictive filter evaluated at FoM states; returns (v, infeasible mask)."""
    z = sys.project_state(x)
    lfh, lgh = lie_derivatives(b, sys.rom, z)
    b0 = lfh + b.alpha * b.eval(z) - delta
    return _solve_filter(lgh, b0, np.asarray(k_nominal(z), dtype=float))


def barrier_rates(sys, b, x, xdot):
    z = sys.project_state(x)
    zdot = np.einsum("...ij,...j->...i", project_state_jacobian(sys, x), xdot)
    return b.eval(z), np.einsum("...i,...i->...", b.gradient(z), zdot)


def rollout_batch(sys: LayeredSystem, b: BarrierSpec, k_nominal, x0, delta, n_steps: int,
                  dt: float, rate: float, record: bool = False, delta_period: int = 1) -> BatchRollout:
    """Roll out ``B`` closed-loop FoM trajectories with zero-order-hold inputs.

    ``delta`` is either an array broadcastable to ``(B,)`` held constant over
    the rollout, or a provider mapping states ``(B, N)`` to buffers ``(B,)``
    that is re-evaluated every ``delta_period`` steps. Trajectories that
    diverge or hit an infeasible filter are frozen and flagged in ``failed``.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    B = x.shape[0]
    provider = delta if callable(delta) else None
    d = None if provider else np.broadcast_to(np.asarray(delta, dtype=float), (B,))

    failed = ~np.all(np.isfinite(x), axis=-1)
    fail_step = np.where(failed, 0, -1)
    bad_filter = np.zeros(B, dtype=bool)
    best = np.full(B, np.inf)
    worst = np.zeros(B, dtype=int)
    min_h = np.full(B, np.inf)
    if record:
        rec = {k: [] for k in ("states", "inputs", "deltas", "h", "hdot")}

    for k in range(n_steps + 1):
        if provider is not None and k % delta_period == 0:
            d = np.broadcast_to(np.asarray(provider(x), dtype=float), (B,))
        v, infeas = filter_inputs(sys, b, k_nominal, x, d)
        newly = infeas & ~failed
        bad_filter |= newly
        fail_step = np.where(newly, k, fail_step)
        failed |= infeas
        xdot = sys.field(x, v)
        h, hdot = barrier_rates(sys, b, x, xdot)
        marg = np.where(failed, -np.inf, hdot + rate * h)
        upd = marg < best
        best = np.where(upd, marg, best)
        worst = np.where(upd, k, worst)
        min_h = np.where(failed, min_h, np.minimum(min_h, h))
        if record:
            rec["states"].append(x)
            rec["inputs"].append(v)
            rec["deltas"].append(np.array(d))
            rec["h"].append(h)
            rec["hdot"].append(hdot)
        if k == n_steps:
            break

        # first RK4 stage reuses xdot already computed at the sample
        k2 = sys.field(x + 0.5 * dt * xdot, v)
        k3 = sys.field(x + 0.5 * dt * k2, v)
        k4 = sys.field(x + dt * k3, v)
        x_new = x + (dt / 6.0) * (xdot + 2.0 * k2 + 2.0 * k3 + k4)
        with np.errstate(invalid="ignore", over="ignore"):
            bad = ~np.all(np.isfinite(x_new), axis=-1) | (np.linalg.norm(x_new, axis=-1) > DIVERGENCE_NORM)
        newly = bad & ~failed
        fail_step = np.where(newly, k + 1, fail_step)
        failed |= bad
        x = np.where(failed[:, None], x, x_new)

    out = BatchRollout(margin=best, worst_index=worst, min_h=min_h, failed=failed,
                       fail_step=fail_step, infeasible_filter=bad_filter)
    if record:
        out.states = np.stack(rec["states"])
        out.inputs = np.stack(rec["inputs"])
        out.deltas = np.stack(rec["deltas"])
        out.h = np.stack(rec["h"])
        out.hdot = np.stack(rec["hdot"])
        out.margins = out.hdot + rate * out.h
    return out


def _raise_failure(ro: BatchRollout, i=0):
    if ro.infeasible_filter[i]:
        raise InfeasibleFilterError(f"filter infeasible at step {ro.fail_step[i]}")
    raise DivergenceError(int(ro.fail_step[i]))


def _single_trajectory(ro: BatchRollout, dt, i=0):
    k = ro.states.shape[0]
    return Trajectory(times=dt * np.arange(k), states=ro.states[:, i], inputs=ro.inputs[:, i],
                      deltas=ro.deltas[:, i], h=ro.h[:, i], hdot=ro.hdot[:, i])


def rollout_margin(sys: LayeredSystem, b: BarrierSpec, k_nominal, x0, delta_provider,
                   cfg: PredictorConfig) -> RolloutResult:
    """Worst barrier-condition margin over a length-T closed-loop rollout from x0.

    ``delta_provider`` may be a constant or a callable of the state.
    """
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    ro = rollout_batch(sys, b, k_nominal, x0, delta_provider, cfg.n_steps, cfg.dt,
                       cfg.rate(b), record=True)
    if ro.failed[0]:
        _raise_failure(ro)
    traj = _single_trajectory(ro, cfg.dt)
    return RolloutResult(trajectory=traj, margin_e=float(ro.margin[0]),
                         worst_time=float(traj.times[ro.worst_index[0]]), min_h=float(ro.min_h[0]))


def simulate(sys: LayeredSystem, b: BarrierSpec, k_nominal, x0, delta, duration: float,
             dt: float = 1e-2, rate: Optional[float] = None, delta_period: int = 1) -> Trajectory:
    """Closed-loop simulation of a single trajectory under a delta provider."""
    n_steps = int(round(duration / dt))
    ro = rollout_batch(sys, b, k_nominal, np.asarray(x0, dtype=float).reshape(1, -1), delta,
                       n_steps, dt, b.alpha if rate is None else rate, record=True,
                       delta_period=delta_period)
    if ro.failed[0]:
        _raise_failure(ro)
    return _single_trajectory(ro, dt)


def simulate_many(sys: LayeredSystem, b: BarrierSpec, k_nominal, X0, delta, duration: float,
                  dt: float = 1e-2, rate: Optional[float] = None) -> list:
    """Batched ``simulate``: one Trajectory per row of ``X0``; diverged rows raise."""
    X0 = np.array(X0, dtype=float, ndmin=2)
    n_steps = int(round(duration / dt))
    ro = rollout_batch(sys, b, k_nominal, X0, delta, n_steps, dt,
                       b.alpha if rate is None else rate, record=True)
    if np.any(ro.failed):
        _raise_failure(ro)
    return [_single_trajectory(ro, dt, i) for i in range(X0.shape[0])]


def delta_update(delta, e, eta):
    """One proportional step: max(0, delta - eta * e)."""
    return np.maximum(0.0, np.asarray(delta, dtype=float) - eta * np.asarray(e, dtype=float))


def _root_distance(delta, e, prev_delta, prev_e, eta):
    """Estimated |delta - delta*| from the secant slope of e(delta).

    Falls back to the update step size when no usable slope is available.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = (e - prev_e) / (delta - prev_delta)
        dist = np.abs(e) / slope
    usable = np.isfinite(dist) & (slope > 0)
    return np.where(usable, dist, np.where(np.isnan(prev_e), np.inf, eta * np.abs(e)))


def optimize_delta_many(sys: LayeredSystem, b: BarrierSpec, k_nominal, X0, cfg: PredictorConfig,
                        delta_init=None) -> list:
    """Run the delta iteration independently for every row of ``X0``."""
    X0 = np.array(X0, dtype=float, ndmin=2)
    B = X0.shape[0]
    rate = cfg.rate(b)
    delta = np.zeros(B) if delta_init is None else np.broadcast_to(np.asarray(delta_init, float), (B,)).copy()
    out_delta = np.full(B, np.nan)
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    final = np.full(B, np.nan)
    prev_delta = np.full(B, np.nan)
    prev_e = np.full(B, np.nan)
    open_idx = np.arange(B)

    for it in range(1, cfg.max_iters + 1):
        if open_idx.size == 0:
            break
        ro = rollout_batch(select_batch(sys, open_idx), b, k_nominal, X0[open_idx],
                           delta[open_idx], cfg.n_steps, cfg.dt, rate)
        e = ro.margin
        cur = delta[open_idx]
        iters[open_idx] = it
        final[open_idx] = e
        done = (cur == 0.0) & (e >= 0.0)
        done |= (np.abs(e) <= cfg.tol) & (_root_distance(cur, e, prev_delta[open_idx],
                                                         prev_e[open_idx], cfg.eta) <= cfg.tol)
        done &= ~ro.failed
        dead = ro.failed.copy()
        if cfg.stop_on_initial_violation:
            dead |= (e < -cfg.tol) & (ro.worst_index == 0)
        new = delta_update(cur, e, cfg.eta)
        dead |= ~done & (new > cfg.delta_cap)

        out_delta[open_idx[done]] = cur[done]
        converged[open_idx[done]] = True
        out_delta[open_idx[dead]] = INFEASIBLE
        if it == cfg.max_iters:
            rest = ~done & ~dead
            # out of iterations: keep the rolled-out delta only if it is safe-side
            out_delta[open_idx[rest]] = np.where(e[rest] < -cfg.tol, INFEASIBLE, cur[rest])
        keep = ~done & ~dead
        prev_delta[open_idx] = cur
        prev_e[open_idx] = e
        delta[open_idx[keep]] = new[keep]
        open_idx = open_idx[keep]

    return [DeltaOutcome(float(out_delta[i]), int(iters[i]), bool(converged[i]), float(final[i]))
            for i in range(B)]


def optimize_delta(sys: LayeredSystem, b: BarrierSpec, k_nominal, x0, cfg: PredictorConfig,
                   delta_init=None) -> DeltaOutcome:
    return optimize_delta_many(sys, b, k_nominal, np.asarray(x0, dtype=float).reshape(1, -1),
                               cfg, delta_init)[0]


def realtime_step(delta_est, sys: LayeredSystem, b: BarrierSpec, k_nominal, x, cfg: PredictorConfig):
    """One delta update at the current state, then the filtered input.

    Returns ``(v, new_delta_estimate)``. ``x`` may be a batch ``(B, N)`` with
    a matching array of estimates, in which case each row is updated
    independently.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    X = x.reshape(-1, sys.N)
    est = np.broadcast_to(np.asarray(delta_est, dtype=float), (X.shape[0],))
    if np.any(est < 0):
        raise ValueError("delta estimate must be nonnegative")
    ro = rollout_batch(sys, b, k_nominal, X, est, cfg.n_steps, cfg.dt, cfg.rate(b))
    if np.any(ro.failed):
        _raise_failure(ro, int(np.argmax(ro.failed)))
    new = delta_update(est, ro.margin, cfg.eta)
    v, infeas = filter_inputs(sys, b, k_nominal, X, new)
    if np.any(infeas):
        raise InfeasibleFilterError("filter infeasible at current state")
    if batched:
        return v, new
    return v[0], float(new[0])


class OptimizedDelta:
    """Solve the delta iteration from scratch at every call (online optimized PSF).

    Infeasible states are filtered with ``delta_cap`` and counted. With
    ``warm_start`` each solve starts from the previous finite solution.
    """

    def __init__(self, sys, b, k_nominal, cfg: PredictorConfig, warm_start=False):
        self.sys, self.b, self.k, self.cfg = sys, b, k_nominal, cfg
        self.warm_start = warm_start
        self.n_calls = 0
        self.n_infeasible = 0
        self.n_iterations = 0
        self._last = None

    def __call__(self, x):
        init = self._last if self.warm_start else None
        if init is not None and np.shape(init)[0] != np.atleast_2d(x).shape[0]:
            init = None
        outs = optimize_delta_many(self.sys, self.b, self.k, x, self.cfg, delta_init=init)
        self.n_calls += len(outs)
        self.n_iterations += sum(o.iterations for o in outs)
        d = np.array([o.delta for o in outs])
        bad = ~np.isfinite(d)
        self.n_infeasible += int(bad.sum())
        self._last = np.where(bad, 0.0, d)
        return np.where(bad, self.cfg.delta_cap, d)


class RealtimeDelta:
    """Stateful real-time iteration: one delta update per control step."""

    def __init__(self, sys, b, k_nominal, cfg: PredictorConfig, delta0=0.0):
        self.sys, self.b, self.k, self.cfg = sys, b, k_nominal, cfg
        self.estimate = float(delta0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float).reshape(1, -1)
        _, self.estimate = realtime_step(self.estimate, self.sys, self.b, self.k, x[0], self.cfg)
        return np.array([self.estimate])


@dataclass
class DeltaTable:
    axes: list
    nodes: np.ndarray
    outcomes: list

    @property
    def deltas(self):
        return np.array([o.delta for o in self.outcomes])

    def grid_deltas(self):
        return self.deltas.reshape([len(a) for a in self.axes])

    def to_csv(self, path):
        N = self.nodes.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"x_{i}" for i in range(N)] + ["delta", "iterations", "converged", "final_margin"])
            for node, o in zip(self.nodes, self.outcomes):
                w.writerow([f"{c:.9g}" for c in node]
                           + ["inf" if not o.feasible else f"{o.delta:.9g}", o.iterations,
                              int(o.converged), f"{o.final_margin:.9g}"])


def resolve_threads(threads=None) -> int:
    if threads is None:
        threads = int(os.environ.get("PCBF_THREADS", "1"))
    return max(1, int(threads))


def tabulate_delta(sys: LayeredSystem, b: BarrierSpec, k_nominal, grid: Sequence, cfg: PredictorConfig,
                   threads: Optional[int] = None, chunk: int = 512) -> DeltaTable:
    """optimize_delta at every node of the rectangular grid spanned by ``grid`` axes.

    Nodes are ordered C-style (last axis fastest) and results keep that order
    whatever the worker count.
    """
    axes = [np.atleast_1d(np.asarray(a, dtype=float)) for a in grid]
    if len(axes) != sys.N:
        raise ConfigError(f"grid has {len(axes)} axes, FoM state has {sys.N}")
    if any(not np.all(np.isfinite(a)) for a in axes):
        raise ConfigError("grid axes must be finite")
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, sys.N)
    pieces = [nodes[i:i + chunk] for i in range(0, len(nodes), chunk)]

    def work(piece):
        return optimize_delta_many(sys, b, k_nominal, piece, cfg)

    workers = resolve_threads(threads)
    if workers == 1 or len(pieces) == 1:
        results = [work(p) for p in pieces]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, pieces))
    return DeltaTable(axes=axes, nodes=nodes, outcomes=[o for r in results for o in r])
