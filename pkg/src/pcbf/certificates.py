"""Tracking-function constants and empirical checks of the buffered barrier H_delta0.

The tracking function is ``V(x) = rho |Psi(x) - k_sf^delta(Pi(x))|``: the gap
between the FoM's RoM-input surrogate and the filtered reference. A
certificate stores constants with ``V' <= -lam V + mu`` and
``|Lgh| <= c_h``, from which

    H_delta0(x) = (alpha_x - alpha) h(Pi(x)) + delta0 - (c_h / rho) V(x)

satisfies ``H' >= -alpha H`` whenever ``lam >= alpha_x`` and
``delta0 >= c_h mu / (alpha_x rho)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .barrier import BarrierSpec, lie_derivatives, safety_filter
from .dynamics import LayeredSystem, Trajectory
from .errors import ConfigError, FormatError
from .predictor import simulate_many

TRACKING_FN_NAME = "psi-error-norm"
V_FLOOR = 1e-8


def psi_error_norm(sys: LayeredSystem, b: BarrierSpec, k_nominal, delta=0.0, rho=1.0):
    """V(x) = rho |Psi(x) - k_sf^delta(Pi(x))| as a batched callable."""
    if rho <= 0:
        raise ConfigError("rho must be positive")

    def V(x):
        x = np.asarray(x, dtype=float)
        v = safety_filter(b, sys.rom, sys.project_state(x), k_nominal, delta).v
        return rho * np.linalg.norm(sys.project_input(x) - v, axis=-1)

    return V


@dataclass
class TrackingCertificate:
    rho: float
    lam: float
    mu: float
    c_h: float
    tracking_fn: Optional[Callable] = None
    tracking_fn_name: str = TRACKING_FN_NAME
    delta: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError("rho must be positive")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not self.mu >= 0:
            raise ConfigError("mu must be nonnegative")
        if not self.c_h > 0:
            raise ConfigError("c_h must be positive")

    def bind(self, sys, b, k_nominal, delta=None):
        """Attach the default tracking function for the given filter context."""
        if delta is not None:
            self.delta = float(delta)
        self.tracking_fn = psi_error_norm(sys, b, k_nominal, self.delta, self.rho)
        return self

    def V(self, x):
        if self.tracking_fn is None:
            raise ConfigError("certificate has no tracking function; call bind()")
        return self.tracking_fn(x)

    def to_dict(self):
        return {"rho": self.rho, "lambda": _enc(self.lam), "mu": self.mu, "c_h": self.c_h,
                "tracking_fn": self.tracking_fn_name}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(float(d["rho"]), float(d["lambda"]), float(d["mu"]), float(d["c_h"]),
                       tracking_fn_name=d.get("tracking_fn", TRACKING_FN_NAME))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid certificate: {exc}") from exc

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def _enc(x):
    return "inf" if math.isinf(x) else x


def estimate_ch(b: BarrierSpec, sys: LayeredSystem, samples) -> float:
    """max |Lgh(Pi(x))| over FoM samples with h(Pi(x)) >= 0."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.size == 0:
        raise ValueError("need at least one sample")
    z = sys.project_state(X)
    if np.any(b.eval(z) < 0):
        raise ValueError("samples must lie in the FoM safe set")
    _, lgh = lie_derivatives(b, sys.rom, z)
    return float(np.max(np.linalg.norm(lgh, axis=-1)))


@dataclass(frozen=True)
class EstimationConfig:
    duration: float = 5.0
    dt: float = 1e-2
    rho: float = 1.0
    delta: float = 0.0
    fixed_lambda: Optional[float] = None
    v_floor: float = V_FLOOR

    def __post_init__(self):
        if self.duration <= 0 or self.dt <= 0 or self.rho <= 0 or self.delta < 0:
            raise ConfigError("duration, dt, rho must be positive and delta nonnegative")
        if self.fixed_lambda is not None and not self.fixed_lambda > 0:
            raise ConfigError("fixed_lambda must be positive")


def tracking_pairs(trajs, V, dt, v_floor=V_FLOOR):
    """(V, V') samples along trajectories; V' by central differences, V < v_floor dropped."""
    vs, vds = [], []
    for tr in trajs:
        val = V(tr.states)
        if len(val) < 3:
            continue
        vd = (val[2:] - val[:-2]) / (2 * dt)
        mid = val[1:-1]
        keep = mid >= v_floor
        vs.append(mid[keep])
        vds.append(vd[keep])
    if not vs:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(vs), np.concatenate(vds)


def upper_hull(px, py):
    """Vertices of the upper convex hull, sorted by x (monotone chain)."""
    order = np.lexsort((py, px))
    pts = np.column_stack([px[order], py[order]])
    # collinearity slack relative to the data scale
    eps = 1e-12 * max(1.0, np.ptp(pts[:, 0]) * np.ptp(pts[:, 1]))
    hull = []
    for p in pts[::-1]:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= eps:
                hull.pop()
            else:
                break
        hull.append(p)
    return np.array(hull[::-1])


def fit_envelope(vs, vds, fixed_lambda=None):
    """Tight (lam, mu) with V' <= -lam V + mu at every pair.

    Without ``fixed_lambda``, lam is minus the least-squares slope through
    the upper-hull vertices; mu is then the smallest valid intercept.
    Returns ``(inf, 0, True)`` when there is no data.
    """
    if len(vs) == 0:
        return math.inf, 0.0, True
    if fixed_lambda is not None:
        lam = float(fixed_lambda)
    else:
        hull = upper_hull(vs, vds)
        if len(hull) >= 2 and np.ptp(hull[:, 0]) > 0:
            slope = np.polyfit(hull[:, 0], hull[:, 1], 1)[0]
        else:
            slope = float(np.min(vds / vs))
        lam = float(max(-slope, np.finfo(float).tiny))
    mu = float(max(0.0, np.max(vds + lam * vs)))
    return lam, mu, False


def estimate_tracking_constants(sys: LayeredSystem, b: BarrierSpec, k_nominal, x0_samples,
                                cfg: EstimationConfig = EstimationConfig()) -> TrackingCertificate:
    """Simulate from each start under the delta filter and fit the tracking envelope."""
    X0 = np.atleast_2d(np.asarray(x0_samples, dtype=float))
    if X0.size == 0:
        raise ValueError("need at least one initial state")
    V = psi_error_norm(sys, b, k_nominal, cfg.delta, cfg.rho)
    trajs = simulate_many(sys, b, k_nominal, X0, cfg.delta, cfg.duration, cfg.dt)
    vs, vds = tracking_pairs(trajs, V, cfg.dt, cfg.v_floor)
    lam, mu, degenerate = fit_envelope(vs, vds, cfg.fixed_lambda)
    safe = np.concatenate([tr.states[tr.h >= 0] for tr in trajs])
    c_h = estimate_ch(b, sys, safe) if len(safe) else 1.0
    cert = TrackingCertificate(cfg.rho, lam, mu, c_h, delta=cfg.delta, degenerate=degenerate)
    cert.tracking_fn = V
    return cert


def delta0_lower_bound(cert: TrackingCertificate, alpha_x: float) -> float:
    if not alpha_x > 0:
        raise ConfigError("alpha_x must be positive")
    if cert.mu == 0:
        return 0.0
    return cert.c_h * cert.mu / (alpha_x * cert.rho)


def self_consistent_delta0(sys, b, k_nominal, x0_samples, cfg: EstimationConfig = EstimationConfig(),
                           iters: int = 3):
    """Alternate estimating (lam, mu) under the delta0 filter and setting delta0 to the bound.

    mu depends on the buffer used in the loop, so a few rounds bring the
    filter and its certificate into agreement. Returns (cert, delta0); the
    certificate is bound to the final delta0.
    """
    delta0 = cfg.delta
    cert = None
    for _ in range(max(1, iters)):
        cert = estimate_tracking_constants(sys, b, k_nominal, x0_samples, dataclasses.replace(cfg, delta=delta0))
        delta0 = delta0_lower_bound(cert, b.alpha_x)
    cert.bind(sys, b, k_nominal, delta0)
    return cert, delta0


def H_margin(x, delta0, cert: TrackingCertificate, b: BarrierSpec, sys: LayeredSystem):
    """(alpha_x - alpha) h(Pi(x)) + delta0 - (c_h / rho) V(x)."""
    h = b.eval(sys.project_state(np.asarray(x, dtype=float)))
    return (b.alpha_x - b.alpha) * h + delta0 - cert.c_h / cert.rho * cert.V(x)


def in_safe_set_S(x, cert, b, sys):
    """Membership in {H >= 0} with delta0 = 0; returns (member, margin)."""
    m = H_margin(x, 0.0, cert, b, sys)
    return m >= 0, m


def in_safe_set_S_delta0(x, delta0, cert, b, sys):
    """Membership in C_FoM intersected with {H_delta0 >= 0}; returns (member, margin)."""
    m = H_margin(x, delta0, cert, b, sys)
    h = b.eval(sys.project_state(np.asarray(x, dtype=float)))
    return (m >= 0) & (h >= 0), m


@dataclass
class CertificateReport:
    hypotheses_hold: bool
    lambda_ok: bool
    delta0_ok: bool
    barrier_ok: bool
    stays_safe: bool
    worst_residual: float
    min_h: float
    residuals: np.ndarray = field(repr=False)
    witness_states: np.ndarray = field(repr=False)
    tol: float = 1e-3

    @property
    def passed(self):
        return self.barrier_ok and self.stays_safe

    def to_dict(self):
        return {
            "hypotheses_hold": self.hypotheses_hold,
            "lambda_ok": self.lambda_ok,
            "delta0_ok": self.delta0_ok,
            "barrier_ok": self.barrier_ok,
            "stays_safe": self.stays_safe,
            "worst_residual": self.worst_residual,
            "min_h": self.min_h,
            "tol": self.tol,
            "residuals": self.residuals.tolist(),
            "witness_states": self.witness_states.tolist(),
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def verify_barrier_condition(traj: Trajectory, b: BarrierSpec, cert: TrackingCertificate, delta0,
                             alpha=None, sys: Optional[LayeredSystem] = None, tol=1e-3,
                             safety_tol=1e-6) -> CertificateReport:
    """Finite-difference check of H_delta0' + alpha H_delta0 >= -tol along ``traj``.

    ``sys`` is needed to recompute h when the trajectory does not carry it.
    Witness states are the samples where the residual or h fall below tolerance.
    """
    alpha = b.alpha if alpha is None else alpha
    dt = traj.dt
    if dt > 1e-2 + 1e-12:
        raise ConfigError("trajectory must be sampled with dt <= 1e-2")
    if traj.h is not None:
        h = np.asarray(traj.h, dtype=float)
    elif sys is not None:
        h = b.eval(sys.project_state(traj.states))
    else:
        raise ConfigError("trajectory without h needs sys")
    H = (b.alpha_x - b.alpha) * h + delta0 - cert.c_h / cert.rho * cert.V(traj.states)
    if len(H) >= 2:
        Hdot = np.gradient(H, dt)
        residuals = Hdot + alpha * H
    else:
        residuals = np.zeros(len(H))
    worst = float(np.min(residuals)) if len(residuals) else 0.0
    lambda_ok = cert.lam >= b.alpha_x
    delta0_ok = delta0 >= delta0_lower_bound(cert, b.alpha_x)
    bad = (residuals < -tol) | (h < -safety_tol)
    return CertificateReport(
        hypotheses_hold=bool(lambda_ok and delta0_ok),
        lambda_ok=bool(lambda_ok),
        delta0_ok=bool(delta0_ok),
        barrier_ok=bool(worst >= -tol),
        stays_safe=bool(np.min(h) >= -safety_tol),
        worst_residual=worst,
        min_h=float(np.min(h)),
        residuals=residuals,
        witness_states=traj.states[bad],
        tol=tol,
    )
