"""Episodic learning of delta_theta(x) with a quantile (check) loss.

Each epoch rolls out the closed loop under the current network, measures the
worst barrier-condition margin over a look-ahead window at every sample,
forms targets ``clip(delta_theta(x) - eta_j * e, 0, delta_max)`` and refits
the network to them.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .barrier import BarrierSpec
from .dynamics import LayeredSystem
from .errors import ConfigError, FormatError, TrainingError
from .predictor import resolve_threads, rollout_batch

log = logging.getLogger(__name__)

ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda s: np.maximum(s, 0.0), lambda a: (a > 0).astype(float)),
}


def softplus(s):
    return np.logaddexp(0.0, s)


def sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


@dataclass
class DeltaModel:
    """MLP delta_theta(x) >= 0; weights are stored (out, in) as in ``W @ a + b``."""

    layer_sizes: list
    weights: list
    biases: list
    activation: str = "tanh"
    output_transform: str = "softplus"
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output_transform != "softplus":
            raise ConfigError(f"unknown output transform {self.output_transform!r}")
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        self.weights = [np.asarray(w, dtype=float).reshape(o, i) for w, i, o in
                        zip(self.weights, self.layer_sizes[:-1], self.layer_sizes[1:])]
        self.biases = [np.asarray(b, dtype=float).reshape(o) for b, o in zip(self.biases, self.layer_sizes[1:])]
        if len(self.weights) != len(self.layer_sizes) - 1 or self.layer_sizes[-1] != 1:
            raise ConfigError("layer sizes must end in a single output")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng, activation="tanh"):
        ws, bs = [], []
        for i, o in zip(layer_sizes[:-1], layer_sizes[1:]):
            ws.append(rng.normal(0.0, np.sqrt(1.0 / i), size=(o, i)))
            bs.append(np.zeros(o))
        return cls(list(layer_sizes), ws, bs, activation)

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    def forward(self, X, cache=False):
        act, _ = ACTIVATIONS[self.activation]
        a = np.atleast_2d(np.asarray(X, dtype=float))
        acts = [a]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = act(a @ W.T + b)
            acts.append(a)
        s = (a @ self.weights[-1].T + self.biases[-1])[:, 0]
        out = softplus(s)
        if cache:
            return out, (acts, s)
        return out

    def backward(self, cache, dpred):
        """Gradients of ``sum(dpred * pred)`` w.r.t. weights and biases."""
        _, dact = ACTIVATIONS[self.activation]
        acts, s = cache
        g = (dpred * sigmoid(s))[:, None]
        dW, db = [None] * len(self.weights), [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            dW[layer] = g.T @ acts[layer]
            db[layer] = g.sum(axis=0)
            if layer > 0:
                g = (g @ self.weights[layer]) * dact(acts[layer])
        return dW, db

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.forward(x.reshape(-1, self.input_dim))
        return out if x.ndim > 1 else out[0]

    def get_params(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        i = 0
        for k in range(len(self.weights)):
            for arr in (self.weights[k], self.biases[k]):
                arr[...] = flat[i:i + arr.size].reshape(arr.shape)
                i += arr.size

    def to_dict(self):
        return {
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "output_transform": self.output_transform,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["layer_sizes"], d["weights"], d["biases"], d["activation"],
                       d["output_transform"], dict(d.get("training_meta", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid model description: {exc}") from exc


def save_model(model: DeltaModel, path):
    with open(path, "w") as f:
        json.dump(model.to_dict(), f)


def load_model(path) -> DeltaModel:
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return DeltaModel.from_dict(d)


def _check_sigma(sigma):
    if not 0.0 < sigma < 1.0:
        raise ConfigError(f"sigma must lie in (0, 1), got {sigma}")


def check_loss(pred, target, sigma):
    """sigma (y - x) if x <= y else (1 - sigma)(x - y), x = pred, y = target."""
    _check_sigma(sigma)
    r = np.asarray(target, dtype=float) - np.asarray(pred, dtype=float)
    return np.where(r >= 0, sigma * r, (sigma - 1.0) * r)


def check_loss_grad(pred, target, sigma):
    """d loss / d pred; the kink at pred == target gets 0."""
    _check_sigma(sigma)
    r = np.asarray(target, dtype=float) - np.asarray(pred, dtype=float)
    return np.where(r > 0, -sigma, np.where(r < 0, 1.0 - sigma, 0.0))


def loss_and_grad(model: DeltaModel, X, y, sigma):
    pred, cache = model.forward(X, cache=True)
    loss = float(np.mean(check_loss(pred, y, sigma)))
    dW, db = model.backward(cache, check_loss_grad(pred, y, sigma) / len(y))
    return loss, dW, db


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 0.9
    eta_j: float = 1.0
    eta_decay: float = 1.0
    n_epochs: int = 10
    n_rollouts: int = 64
    rollout_T: float = 10.0
    window_T: float = 2.0
    window_mode: str = "sliding"
    dt: float = 1e-2
    learning_rate: float = 1e-3
    lr_final: Optional[float] = None
    batch_size: int = 512
    fit_passes: int = 10
    seed: int = 0
    delta_max: float = 5.0
    hidden: tuple = (64, 64, 64)
    activation: str = "tanh"
    sample_stride: int = 1
    randomization: dict = field(default_factory=dict)
    rollout_chunk: int = 64

    def __post_init__(self):
        _check_sigma(self.sigma)
        if self.window_mode not in ("sliding", "suffix"):
            raise ConfigError(f"unknown window_mode {self.window_mode!r}")
        for name in ("eta_j", "rollout_T", "window_T", "dt", "learning_rate", "delta_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "sample_stride", "rollout_chunk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_epochs < 0 or self.n_rollouts < 1 or self.fit_passes < 0:
            raise ConfigError("n_epochs >= 0, n_rollouts >= 1, fit_passes >= 0 required")

    def eta_at(self, epoch):
        return self.eta_j * self.eta_decay ** epoch


@dataclass
class SystemDistribution:
    """Randomized layered systems plus a box of initial FoM states.

    ``build(**params)`` receives one array per randomized parameter (shape
    ``(B,)``) and returns a batched ``LayeredSystem``. Initial states with
    ``h(Pi(x)) < 0`` are redrawn.
    """

    build: Callable[..., LayeredSystem]
    x0_low: np.ndarray
    x0_high: np.ndarray
    defaults: dict = field(default_factory=dict)

    def sample(self, seeds, randomization: dict, b: BarrierSpec):
        """One randomized system row and one safe initial state per seed."""
        names = sorted(set(self.defaults) | set(randomization))
        rngs = [np.random.default_rng(ss) for ss in seeds]
        params = {}
        for name in names:
            spec = randomization.get(name, self.defaults.get(name))
            if np.ndim(spec) == 1 and len(spec) == 2:
                params[name] = np.array([rng.uniform(spec[0], spec[1]) for rng in rngs])
            else:
                params[name] = np.full(len(rngs), float(spec))
        sys = self.build(**params)
        lo = np.asarray(self.x0_low, dtype=float)
        hi = np.asarray(self.x0_high, dtype=float)
        X0 = []
        for rng in rngs:
            for _ in range(1000):
                x = rng.uniform(lo, hi)
                if b.eval(sys.project_state(x)) >= 0:
                    break
            else:
                raise ConfigError("could not draw a safe initial state from the box")
            X0.append(x)
        return sys, np.array(X0)


@dataclass
class EpochDataset:
    states: np.ndarray
    violations: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if not (len(self.states) == len(self.violations) == len(self.targets)):
            raise ValueError("dataset columns must have equal length")

    def __len__(self):
        return len(self.targets)


def window_min(margins, window: int, mode="sliding"):
    """Per-sample minimum of ``margins`` over [t, t + window] (clipped at the end).

    ``margins`` has time along axis 0. ``mode="suffix"`` takes [t, end].
    """
    margins = np.asarray(margins, dtype=float)
    if mode == "suffix":
        return np.minimum.accumulate(margins[::-1], axis=0)[::-1]
    pad = np.full((window,) + margins.shape[1:], np.inf)
    view = sliding_window_view(np.concatenate([margins, pad], axis=0), window + 1, axis=0)
    return view.min(axis=-1)


def make_targets(pred, violation, eta, delta_max):
    """clip(pred - eta * e, 0, delta_max)."""
    return np.clip(np.asarray(pred, dtype=float) - eta * np.asarray(violation, dtype=float), 0.0, delta_max)


def _epoch_seeds(cfg: TrainConfig, epoch: int):
    return np.random.SeedSequence([cfg.seed, epoch]).spawn(cfg.n_rollouts)


def collect_epoch(sys_distribution: SystemDistribution, b: BarrierSpec, k_nominal, model: DeltaModel,
                  cfg: TrainConfig, epoch: int = 0, eta=None, threads=None) -> EpochDataset:
    seeds = _epoch_seeds(cfg, epoch)
    n_steps = int(round(cfg.rollout_T / cfg.dt))
    window = int(round(cfg.window_T / cfg.dt))
    eta = cfg.eta_at(epoch) if eta is None else eta
    chunks = [seeds[i:i + cfg.rollout_chunk] for i in range(0, len(seeds), cfg.rollout_chunk)]

    def work(chunk):
        sys_b, X0 = sys_distribution.sample(chunk, cfg.randomization, b)
        ro = rollout_batch(sys_b, b, k_nominal, X0, model, n_steps, cfg.dt, b.alpha, record=True)
        return ro

    workers = resolve_threads(threads)
    if workers == 1 or len(chunks) == 1:
        results = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chunks))

    states, viols, targets = [], [], []
    for ro in results:
        keep = ~ro.failed
        if not np.all(keep):
            log.warning("discarding %d diverged trajectories", int((~keep).sum()))
        if not np.any(keep):
            continue
        e = window_min(ro.margins[:, keep], window, cfg.window_mode)
        d = ro.deltas[:, keep]
        t = make_targets(d, e, eta, cfg.delta_max)
        sl = slice(None, None, cfg.sample_stride)
        # trajectory-major ordering
        states.append(np.swapaxes(ro.states[sl][:, keep], 0, 1).reshape(-1, ro.states.shape[-1]))
        viols.append(e[sl].T.ravel())
        targets.append(t[sl].T.ravel())
    if not states:
        raise TrainingError(epoch, -1, "every rollout diverged")
    return EpochDataset(np.concatenate(states), np.concatenate(viols), np.concatenate(targets))


def fit(model: DeltaModel, data: EpochDataset, cfg: TrainConfig, epoch: int = 0) -> DeltaModel:
    """Adam on the mean check loss; returns a new model, ``model`` is untouched."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    model = copy.deepcopy(model)
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    X = np.asarray(data.states, dtype=float)
    y = np.clip(np.asarray(data.targets, dtype=float), 0.0, cfg.delta_max)
    params = model.weights + model.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(y)
    n_batches = max(1, -(-n // cfg.batch_size))
    total = cfg.fit_passes * n_batches
    step = 0
    for _ in range(cfg.fit_passes):
        order = rng.permutation(n)
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            loss, dW, db = loss_and_grad(model, X[idx], y[idx], cfg.sigma)
            if not np.isfinite(loss):
                raise TrainingError(epoch, bi)
            lr = cfg.learning_rate
            if cfg.lr_final is not None:
                lr = cfg.learning_rate + (cfg.lr_final - cfg.learning_rate) * step / max(1, total - 1)
            step += 1
            for p, g, mi, vi in zip(params, dW + db, m, v):
                mi *= beta1
                mi += (1 - beta1) * g
                vi *= beta2
                vi += (1 - beta2) * g * g
                mhat = mi / (1 - beta1 ** step)
                vhat = vi / (1 - beta2 ** step)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
    return model


def mean_check_loss(model: DeltaModel, data: EpochDataset, sigma, delta_max=np.inf):
    y = np.clip(data.targets, 0.0, delta_max)
    return float(np.mean(check_loss(model(data.states), y, sigma)))


METRIC_FIELDS = ("epoch", "mean_loss", "frac_violating", "wall_time_s")


def train(sys_distribution: SystemDistribution, b: BarrierSpec, k_nominal, cfg: TrainConfig,
          history: Optional[list] = None, threads=None, record_time: bool = False) -> DeltaModel:
    """Run ``cfg.n_epochs`` rounds of collect + fit from a seeded initialization.

    Per-epoch metrics are appended to ``history`` when given. Wall-clock time
    is only recorded with ``record_time=True`` so that metrics stay
    reproducible by default.
    """
    rng = np.random.default_rng(cfg.seed)
    dim = len(np.atleast_1d(sys_distribution.x0_low))
    model = DeltaModel.init([dim, *cfg.hidden, 1], rng, cfg.activation)
    model.training_meta = {"seed": cfg.seed, "sigma": cfg.sigma, "delta_max": cfg.delta_max}
    start = time.perf_counter()
    for epoch in range(cfg.n_epochs):
        data = collect_epoch(sys_distribution, b, k_nominal, model, cfg, epoch, threads=threads)
        model = fit(model, data, cfg, epoch)
        row = {
            "epoch": epoch,
            "mean_loss": mean_check_loss(model, data, cfg.sigma, cfg.delta_max),
            "frac_violating": float(np.mean(data.violations < 0)),
            "wall_time_s": time.perf_counter() - start if record_time else None,
        }
        log.info("epoch %d: loss %.5g, violating %.3f", epoch, row["mean_loss"], row["frac_violating"])
        if history is not None:
            history.append(row)
    return model


def config_dict(cfg: TrainConfig):
    return asdict(cfg)
