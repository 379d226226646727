"""Control-affine reduced/full order models, their coupling, and fixed-step RK4.

Every map in this module works on batched arrays: a state argument may have
shape ``(N,)`` or ``(..., N)`` and outputs carry the same leading dimensions.
Model parameters (e.g. the tracking gain) may themselves be arrays that
broadcast against that batch, which is how domain-randomized rollouts are run
in a single vectorized pass.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DivergenceError, FormatError, ShapeError

DIVERGENCE_NORM = 1e6
FD_STEP = 1e-6


@dataclass(frozen=True)
class ControlAffineModel:
    """xdot = drift(x) + actuation(x) @ u."""

    dim_state: int
    dim_input: int
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]

    def field(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.drift(x) + np.einsum("...ij,...j->...i", self.actuation(x), u)


@dataclass(frozen=True)
class LayeredSystem:
    """RoM + FoM coupled through a tracking controller and two projections.

    ``tracking_controller(x, v)`` is the low-level map K, ``project_state`` is
    Pi (FoM state -> RoM state) and ``project_input`` is Psi (FoM state -> RoM
    input). ``state_jacobian`` optionally returns dPi/dx with shape
    ``(..., n, N)``; central differences are used when it is missing.
    """

    rom: ControlAffineModel
    fom: ControlAffineModel
    tracking_controller: Callable[[np.ndarray, np.ndarray], np.ndarray]
    project_state: Callable[[np.ndarray], np.ndarray]
    project_input: Callable[[np.ndarray], np.ndarray]
    state_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    params: dict = field(default_factory=dict)
    # optional fused F(x) + G(x) K(x, v); must agree with the composed maps
    closed_loop: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def field(self, x, v):
        if self.closed_loop is not None:
            return self.closed_loop(x, v)
        return self.fom.field(x, self.tracking_controller(x, v))

    @property
    def n(self):
        return self.rom.dim_state

    @property
    def m(self):
        return self.rom.dim_input

    @property
    def N(self):
        return self.fom.dim_state

    @property
    def M(self):
        return self.fom.dim_input


def _check_last_dim(arr, size, name):
    if arr.ndim == 0 or arr.shape[-1] != size:
        raise ShapeError(f"{name} has shape {arr.shape}, expected trailing dimension {size}")


def fom_closed_loop_field(sys: LayeredSystem, x, v):
    """F(x) + G(x) K(x, v)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_last_dim(x, sys.N, "x")
    _check_last_dim(v, sys.m, "v")
    return sys.field(x, v)


def project_state_jacobian(sys: LayeredSystem, x):
    x = np.asarray(x, dtype=float)
    if sys.state_jacobian is not None:
        return np.asarray(sys.state_jacobian(x), dtype=float)
    cols = []
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = FD_STEP
        cols.append((sys.project_state(x + e) - sys.project_state(x - e)) / (2 * FD_STEP))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class ProjectionReport:
    max_residual_dynamics: float
    max_residual_actuation: float
    passed: bool


def check_projection_consistency(sys: LayeredSystem, samples, tol=1e-8) -> ProjectionReport:
    """Numerically check the relative-degree assumption linking Pi, Psi, F and G.

    ``samples`` is a sequence of ``(x, v)`` pairs or a plain array of states.
    The input ``v`` is irrelevant to the check and is ignored.
    """
    if len(samples) == 0:
        raise ValueError("samples must be nonempty")
    if isinstance(samples, np.ndarray):
        xs = np.atleast_2d(samples).astype(float)
    else:
        xs = np.array([np.asarray(s[0] if isinstance(s, tuple) else s, dtype=float) for s in samples])
    _check_last_dim(xs, sys.N, "sample state")
    jac = project_state_jacobian(sys, xs)
    if jac.shape[-2:] != (sys.n, sys.N):
        raise ShapeError(f"Jacobian of Pi has shape {jac.shape[-2:]}, expected {(sys.n, sys.N)}")
    z = sys.project_state(xs)
    psi = sys.project_input(xs)
    _check_last_dim(z, sys.n, "Pi(x)")
    _check_last_dim(psi, sys.m, "Psi(x)")

    lhs = np.einsum("...ij,...j->...i", jac, sys.fom.drift(xs))
    res_dyn = np.linalg.norm(lhs - sys.rom.field(z, psi), axis=-1)
    res_act = np.linalg.norm(np.einsum("...ij,...jk->...ik", jac, sys.fom.actuation(xs)), axis=(-2, -1))
    max_dyn = float(np.max(res_dyn))
    max_act = float(np.max(res_act))
    return ProjectionReport(max_dyn, max_act, bool(max_dyn <= tol and max_act <= tol))


def make_single_integrator(n: int) -> ControlAffineModel:
    if n < 1:
        raise ConfigError("n must be >= 1")
    eye = np.eye(n)
    return ControlAffineModel(
        dim_state=n,
        dim_input=n,
        drift=lambda z: np.zeros_like(np.asarray(z, dtype=float)),
        actuation=lambda z: np.broadcast_to(eye, np.shape(z)[:-1] + (n, n)),
    )


def make_double_integrator(n: int, k_v) -> LayeredSystem:
    """Double-integrator FoM tracking single-integrator velocity commands.

    ``k_v`` may be a scalar or an array of per-sample gains of shape ``(B,)``
    for batched, randomized rollouts.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    gain = np.asarray(k_v, dtype=float)
    if gain.size == 0 or not np.all(np.isfinite(gain)) or np.any(gain <= 0):
        raise ConfigError(f"k_v must be positive, got {k_v!r}")
    if gain.ndim > 1:
        raise ConfigError("k_v must be a scalar or a 1-D array")
    gain_b = gain[..., None]

    def drift(x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x[..., n:], np.zeros_like(x[..., n:])], axis=-1)

    act = np.vstack([np.zeros((n, n)), np.eye(n)])
    jac = np.hstack([np.eye(n), np.zeros((n, n))])

    def actuation(x):
        return np.broadcast_to(act, np.shape(x)[:-1] + (2 * n, n))

    def tracking(x, v):
        return -gain_b * (np.asarray(x, dtype=float)[..., n:] - v)

    def closed_loop(x, v):
        vel = x[..., n:]
        return np.concatenate([vel, -gain_b * (vel - v)], axis=-1)

    fom = ControlAffineModel(2 * n, n, drift, actuation)
    return LayeredSystem(
        rom=make_single_integrator(n),
        fom=fom,
        tracking_controller=tracking,
        project_state=lambda x: np.asarray(x, dtype=float)[..., :n],
        project_input=lambda x: np.asarray(x, dtype=float)[..., n:],
        state_jacobian=lambda x: np.broadcast_to(jac, np.shape(x)[:-1] + (n, 2 * n)),
        params={"family": "double_integrator", "n": n, "k_v": k_v},
        closed_loop=closed_loop,
    )


@dataclass
class Trajectory:
    """Uniformly sampled closed-loop trajectory.

    ``inputs`` holds the RoM input applied (zero-order hold) from each sample
    to the next; ``h``/``hdot`` are optional barrier diagnostics.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    deltas: np.ndarray
    h: Optional[np.ndarray] = None
    hdot: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(len(self.times), -1)
        self.deltas = np.asarray(self.deltas, dtype=float).reshape(len(self.times))
        k = len(self.times)
        if not (len(self.states) == len(self.inputs) == len(self.deltas) == k):
            raise ShapeError("trajectory sequences must have equal length")
        if k > 1 and not np.all(np.diff(self.times) > 0):
            raise ShapeError("times must be strictly increasing")
        for name in ("h", "hdot"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float).reshape(k)
                setattr(self, name, arr)

    def __len__(self):
        return len(self.times)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def header(self):
        N = self.states.shape[1]
        m = self.inputs.shape[1]
        return (["t"] + [f"x_{i}" for i in range(N)] + [f"v_{i}" for i in range(m)]
                + ["delta", "h", "hdot"])

    def to_csv(self, path):
        k = len(self)
        h = self.h if self.h is not None else np.full(k, np.nan)
        hdot = self.hdot if self.hdot is not None else np.full(k, np.nan)
        rows = np.column_stack([self.times, self.states, self.inputs, self.deltas, h, hdot])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.header())
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            reader = csv.reader(f)
            try:
                header = [c.strip() for c in next(reader)]
            except StopIteration:
                raise FormatError(f"{path}: empty trajectory file") from None
            rows = [r for r in reader if r]
        if not header or header[0] != "t" or header[-3:] != ["delta", "h", "hdot"]:
            raise FormatError(f"{path}: unexpected trajectory header {header}")
        try:
            data = np.array([[float(c) for c in r] for r in rows], dtype=float).reshape(len(rows), len(header))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        N = sum(1 for c in header if c.startswith("x_"))
        m = sum(1 for c in header if c.startswith("v_"))
        return cls(times=data[:, 0], states=data[:, 1:1 + N], inputs=data[:, 1 + N:1 + N + m],
                   deltas=data[:, -3], h=data[:, -2], hdot=data[:, -1])


def _fmt(v):
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


def check_state(x, step):
    """Raise DivergenceError if any state is non-finite or beyond the norm guard."""
    if not np.all(np.isfinite(x)) or np.any(np.linalg.norm(np.atleast_1d(x), axis=-1) > DIVERGENCE_NORM):
        raise DivergenceError(step)


def rk4_step(field, t, x, dt):
    k1 = field(t, x)
    k2 = field(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = field(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = field(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(field, x0, dt: float, n_steps: int, t0: float = 0.0) -> Trajectory:
    """Classical fixed-step RK4 for ``xdot = field(t, x)``."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=float).copy()
    check_state(x, 0)
    states = np.empty((n_steps + 1,) + x.shape)
    states[0] = x
    for k in range(n_steps):
        x = rk4_step(field, t0 + k * dt, x, dt)
        check_state(x, k + 1)
        states[k + 1] = x
    times = t0 + dt * np.arange(n_steps + 1)
    flat = states.reshape(n_steps + 1, -1)
    return Trajectory(times, flat, np.zeros((n_steps + 1, 0)), np.full(n_steps + 1, np.nan))


def select_batch(sys: LayeredSystem, idx) -> LayeredSystem:
    """Restrict per-sample parameter arrays of ``sys`` to the rows ``idx``."""
    k_v = sys.params.get("k_v")
    if sys.params.get("family") == "double_integrator" and np.ndim(k_v) == 1:
        return make_double_integrator(sys.params["n"], np.asarray(k_v)[idx])
    return sys
