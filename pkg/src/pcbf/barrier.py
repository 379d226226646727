"""Barrier functions, Lie derivatives and the closed-form (predictive) safety filter.

The filter solves

    min_v 0.5 |v - k(z)|^2   s.t.   Lfh(z) + Lgh(z) v >= -alpha h(z) + delta

over V = R^m, which has the exact solution implemented in ``safety_filter``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import ControlAffineModel, LayeredSystem, project_state_jacobian
from .errors import ConfigError, InfeasibleFilterError, ShapeError, SingularityError

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class BarrierSpec:
    eval: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    alpha: float = 1.0
    alpha_x: float = 2.0
    name: str = "custom"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not self.alpha_x > self.alpha:
            raise ConfigError(f"alpha_x must exceed alpha ({self.alpha_x} <= {self.alpha})")

    def __call__(self, z):
        return self.eval(z)


@dataclass(frozen=True)
class ObstacleField:
    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        r = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if c.shape[0] < 1 or c.shape[1] != 2:
            raise ConfigError(f"centers must have shape (N_obs, 2), got {c.shape}")
        if r.shape != (c.shape[0],):
            raise ConfigError("centers and radii must have equal length")
        if np.any(r <= 0):
            raise ConfigError("obstacle radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    @classmethod
    def from_config(cls, obstacles):
        """Build from ``[{"c": [x, y], "r": r}, ...]``."""
        try:
            return cls([o["c"] for o in obstacles], [o["r"] for o in obstacles])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad obstacle entry: {exc}") from exc


@dataclass(frozen=True)
class FilterResult:
    v: np.ndarray
    constraint_value: np.ndarray
    active: np.ndarray
    nominal_v: np.ndarray


def halfspace_barrier(alpha=1.0, alpha_x=2.0) -> BarrierSpec:
    """h(z) = z for a scalar RoM (keep position nonnegative)."""

    def h(z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 0:
            return z
        if z.shape[-1] != 1:
            raise ShapeError("halfspace barrier needs a scalar RoM state")
        return z[..., 0]

    def grad(z):
        return np.ones_like(np.asarray(z, dtype=float).reshape(np.shape(z) or (1,)))

    return BarrierSpec(h, grad, alpha, alpha_x, name="halfspace")


def obstacle_barrier(field: ObstacleField, alpha=1.0, alpha_x=2.0) -> BarrierSpec:
    """Signed distance to the closest circular obstacle (non-smooth min)."""
    centers, radii = field.centers, field.radii

    def dists(z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != 2:
            raise ShapeError("obstacle barrier needs a planar RoM state")
        diff = z[..., None, :] - centers
        return diff, np.linalg.norm(diff, axis=-1)

    def h(z):
        _, d = dists(z)
        return np.min(d - radii, axis=-1)

    def grad(z):
        diff, d = dists(z)
        # argmin returns the first minimizer, i.e. the lowest index on ties
        j = np.argmin(d - radii, axis=-1)
        dj = np.take_along_axis(d, j[..., None], axis=-1)
        if np.any(dj == 0.0):
            raise SingularityError("barrier gradient undefined at an obstacle center")
        diff_j = np.take_along_axis(diff, j[..., None, None], axis=-2)[..., 0, :]
        return diff_j / dj

    return BarrierSpec(h, grad, alpha, alpha_x, name="obstacles")


def lie_derivatives(b: BarrierSpec, rom: ControlAffineModel, z):
    z = np.asarray(z, dtype=float)
    grad = b.gradient(z)
    lfh = np.einsum("...i,...i->...", grad, rom.drift(z))
    lgh = np.einsum("...i,...ij->...j", grad, rom.actuation(z))
    return lfh, lgh


def _solve_filter(lgh, b0, k):
    """Closed-form minimizer of |v - k|^2 s.t. lgh.v + b0 >= 0, batched.

    Returns (v, infeasible_mask).
    """
    norm2 = np.einsum("...i,...i->...", lgh, lgh)
    slack = b0 + np.einsum("...i,...i->...", lgh, k)
    degenerate = norm2 == 0.0
    safe_norm2 = np.where(degenerate, 1.0, norm2)
    step = np.where(degenerate, 0.0, np.maximum(0.0, -slack) / safe_norm2)
    v = k + step[..., None] * lgh
    infeasible = degenerate & (b0 < 0)
    return v, infeasible


def safety_filter(b: BarrierSpec, rom: ControlAffineModel, z, k_nominal, delta=0.0,
                  input_bounds: Optional[tuple] = None) -> FilterResult:
    """Minimum-deviation filter with buffer ``delta`` (``delta = 0`` is the nominal filter).

    ``input_bounds=(low, high)`` clips the filtered input afterwards. Clipping
    voids the safety guarantee and a warning is emitted.
    """
    z = np.asarray(z, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0):
        raise ValueError("delta must be nonnegative")
    k = np.asarray(k_nominal(z), dtype=float)
    lfh, lgh = lie_derivatives(b, rom, z)
    b0 = lfh + b.alpha * b.eval(z) - delta
    v, infeasible = _solve_filter(lgh, b0, k)
    if np.any(infeasible):
        raise InfeasibleFilterError("L_g h = 0 and the CBF condition fails at this state")
    if input_bounds is not None:
        warnings.warn("box saturation after filtering voids the safety guarantee", stacklevel=2)
        v = np.clip(v, input_bounds[0], input_bounds[1])
    cval = b0 + np.einsum("...i,...i->...", lgh, v)
    return FilterResult(v=v, constraint_value=cval, active=cval <= FEAS_TOL, nominal_v=k)


def hdot_fom(b: BarrierSpec, sys: LayeredSystem, x, xdot):
    """Time derivative of h(Pi(x)) along the FoM velocity ``xdot``."""
    x = np.asarray(x, dtype=float)
    zdot = np.einsum("...ij,...j->...i", project_state_jacobian(sys, x), np.asarray(xdot, dtype=float))
    return np.einsum("...i,...i->...", b.gradient(sys.project_state(x)), zdot)


def constant_controller(value):
    value = np.atleast_1d(np.asarray(value, dtype=float))

    def k(z):
        return np.broadcast_to(value, np.shape(z)[:-1] + value.shape).copy()

    return k


def saturated_proportional(k_p, v_max, goal=None):
    """k(z) = -min(v_max / (k_p |z - goal|), 1) k_p (z - goal)."""
    if k_p <= 0 or v_max <= 0:
        raise ConfigError("k_p and v_max must be positive")
    goal = None if goal is None else np.asarray(goal, dtype=float)

    def k(z):
        e = np.asarray(z, dtype=float)
        if goal is not None:
            e = e - goal
        dist = np.linalg.norm(e, axis=-1, keepdims=True)
        with np.errstate(divide="ignore"):
            scale = np.minimum(np.where(dist > 0, v_max / (k_p * dist), 1.0), 1.0)
        return -scale * k_p * e

    return k
