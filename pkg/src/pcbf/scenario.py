"""Scenario files: a TOML description of system, barrier, controller and filter mode.

``load_scenario`` resolves every default explicitly so the resolved
dictionary can be written next to each output for provenance.
"""
from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .barrier import ObstacleField, constant_controller, halfspace_barrier, obstacle_barrier, saturated_proportional
from .certificates import EstimationConfig
from .dynamics import make_double_integrator
from .errors import ConfigError
from .learner import DeltaModel, SystemDistribution, TrainConfig, load_model
from .predictor import OptimizedDelta, PredictorConfig, RealtimeDelta

MODES = ("nominal", "constant", "optimized", "realtime", "learned")

DEFAULTS = {
    "name": "scenario",
    "seed": 0,
    "duration": 10.0,
    "dt": 1e-2,
    "mode": "nominal",
    "delta0": 0.0,
    "delta_period": 1,
    "model": "",
    "initial_states": [],
    "system": {"family": "double_integrator", "n": 1, "k_v": 1.0},
    "barrier": {"kind": "halfspace", "alpha": 1.0, "alpha_x": 2.0, "obstacles": []},
    "controller": {"kind": "constant", "value": [-0.5], "k_p": 1.0, "v_max": 1.0, "goal": []},
    "predictor": {},
    "train": {},
    "distribution": {"x0_low": [], "x0_high": []},
    "certificate": {"n_samples": 100, "x0_low": [], "x0_high": [], "fixed_point_iters": 0},
    "grid": {"axes": []},
    "compare": {"modes": ["nominal", "optimized", "learned"], "sup_threshold": None, "warm_start": True},
}


def _dataclass_defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            val = f.default
        elif f.default_factory is not dataclasses.MISSING:
            val = f.default_factory()
        else:
            continue
        out[f.name] = list(val) if isinstance(val, tuple) else val
    return out


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise ConfigError(f"unknown config key {path}{key}")
        if isinstance(out[key], dict) and out[key] and not isinstance(val, dict):
            raise ConfigError(f"{path}{key} must be a table")
        if isinstance(out[key], dict) and isinstance(val, dict) and out[key]:
            out[key] = _merge(out[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class Scenario:
    config: dict
    base_dir: str = "."
    path: Optional[str] = None

    def __getitem__(self, key):
        return self.config[key]

    @property
    def seed(self):
        return int(self.config["seed"])

    def resolved(self):
        return copy.deepcopy(self.config)

    # builders -----------------------------------------------------------

    def system(self, k_v=None):
        s = self.config["system"]
        if s["family"] != "double_integrator":
            raise ConfigError(f"unknown system family {s['family']!r}")
        return make_double_integrator(int(s["n"]), s["k_v"] if k_v is None else k_v)

    def barrier(self):
        b = self.config["barrier"]
        if b["kind"] == "halfspace":
            if int(self.config["system"]["n"]) != 1:
                raise ConfigError("halfspace barrier needs system.n = 1")
            return halfspace_barrier(b["alpha"], b["alpha_x"])
        if b["kind"] == "obstacles":
            if int(self.config["system"]["n"]) != 2:
                raise ConfigError("obstacle barrier needs system.n = 2")
            if not b["obstacles"]:
                raise ConfigError("barrier.obstacles is empty")
            return obstacle_barrier(ObstacleField.from_config(b["obstacles"]), b["alpha"], b["alpha_x"])
        raise ConfigError(f"unknown barrier kind {b['kind']!r}")

    def obstacle_radius(self):
        obs = self.config["barrier"]["obstacles"]
        return float(min(o["r"] for o in obs)) if obs else None

    def controller(self):
        c = self.config["controller"]
        n = int(self.config["system"]["n"])
        if c["kind"] == "constant":
            value = np.atleast_1d(np.asarray(c["value"], dtype=float))
            if value.shape != (n,):
                raise ConfigError(f"controller.value must have {n} entries")
            return constant_controller(value)
        if c["kind"] == "saturated_proportional":
            goal = c["goal"] if len(c["goal"]) else None
            if goal is not None and len(goal) != n:
                raise ConfigError(f"controller.goal must have {n} entries")
            return saturated_proportional(c["k_p"], c["v_max"], goal)
        raise ConfigError(f"unknown controller kind {c['kind']!r}")

    def predictor_config(self):
        return PredictorConfig(**self.config["predictor"])

    def train_config(self):
        t = dict(self.config["train"])
        t["hidden"] = tuple(t["hidden"])
        t["randomization"] = {k: (tuple(v) if isinstance(v, list) else v) for k, v in t["randomization"].items()}
        return TrainConfig(**t)

    def estimation_config(self):
        c = {k: v for k, v in self.config["certificate"].items()
             if k in {f.name for f in dataclasses.fields(EstimationConfig)}}
        return EstimationConfig(**c)

    def distribution(self):
        d = self.config["distribution"]
        N = 2 * int(self.config["system"]["n"])
        lo, hi = np.asarray(d["x0_low"], dtype=float), np.asarray(d["x0_high"], dtype=float)
        if lo.shape != (N,) or hi.shape != (N,) or np.any(hi < lo):
            raise ConfigError(f"distribution.x0_low/x0_high must be {N}-vectors with low <= high")
        return SystemDistribution(lambda k_v: self.system(k_v), lo, hi,
                                  {"k_v": float(self.config["system"]["k_v"])})

    def initial_states(self):
        X = np.asarray(self.config["initial_states"], dtype=float)
        N = 2 * int(self.config["system"]["n"])
        if X.ndim != 2 or X.shape[1] != N or len(X) == 0:
            raise ConfigError(f"initial_states must be a nonempty list of {N}-vectors")
        return X

    def grid_axes(self):
        axes = self.config["grid"]["axes"]
        if not axes:
            raise ConfigError("grid.axes is empty")
        try:
            return [np.linspace(lo, hi, int(num)) for lo, hi, num in axes]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"grid.axes entries must be [low, high, count]: {exc}") from exc

    def model_path(self):
        p = self.config["model"]
        if not p:
            return None
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def load_model(self) -> DeltaModel:
        p = self.model_path()
        if p is None or not os.path.exists(p):
            raise ConfigError(f"learned mode needs an existing model file (got {p!r})")
        return load_model(p)

    def delta_provider(self, mode=None, sys=None, b=None, k=None, warm_start=False):
        mode = self.config["mode"] if mode is None else mode
        sys = sys or self.system()
        b = b or self.barrier()
        k = k or self.controller()
        if mode == "nominal":
            return 0.0
        if mode == "constant":
            if self.config["delta0"] < 0:
                raise ConfigError("delta0 must be nonnegative")
            return float(self.config["delta0"])
        if mode == "optimized":
            return OptimizedDelta(sys, b, k, self.predictor_config(), warm_start=warm_start)
        if mode == "realtime":
            return RealtimeDelta(sys, b, k, self.predictor_config(), self.config["delta0"])
        if mode == "learned":
            return self.load_model()
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def default_config():
    cfg = copy.deepcopy(DEFAULTS)
    cfg["predictor"] = _dataclass_defaults(PredictorConfig)
    cfg["train"] = _dataclass_defaults(TrainConfig)
    cfg["certificate"].update(_dataclass_defaults(EstimationConfig))
    return cfg


def scenario_from_dict(raw: dict, base_dir=".", path=None, seed=None) -> Scenario:
    cfg = _merge(default_config(), raw)
    if seed is not None:
        cfg["seed"] = int(seed)
        cfg["train"]["seed"] = int(seed)
    if cfg["mode"] not in MODES:
        raise ConfigError(f"unknown mode {cfg['mode']!r}; expected one of {MODES}")
    if cfg["dt"] <= 0 or cfg["duration"] < 0 or int(cfg["delta_period"]) < 1:
        raise ConfigError("need dt > 0, duration >= 0, delta_period >= 1")
    sc = Scenario(cfg, base_dir, path)
    # fail early on inconsistent sections
    sc.barrier()
    sc.controller()
    sc.predictor_config()
    sc.train_config()
    sc.estimation_config()
    return sc


def load_scenario(path, seed=None) -> Scenario:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(raw, os.path.dirname(os.path.abspath(path)), path, seed)
