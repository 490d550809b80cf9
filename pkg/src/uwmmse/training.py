"""Unsupervised training of the unfolded network.

The loss is the negative mean sum-rate of the network output over a batch;
no reference beamformers are needed. Gradients come either from the
reverse-mode engine in :mod:`uwmmse.autodiff` or from central finite
differences over the (small) flat parameter vector.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointFormatError, ConfigurationError, TrainingError
from .neural import GcnParams, ModelParams, ReductionFilter, init_params, unfolded_forward
from .wmmse import InterferenceMode, ProblemConfig, sum_rate

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "uwmmse-checkpoint"
CHECKPOINT_VERSION = 1


class GradientMethod(str, enum.Enum):
    ANALYTIC = "analytic"
    FINITE_DIFFERENCE = "fd"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower()
        if key in ("centralfinitedifference", "finite-difference", "central-fd"):
            return cls.FINITE_DIFFERENCE
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown gradient method {name!r}") from None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-2
    max_iters: int = 15000
    patience: int = 10
    eval_every: int = 100
    seed: int = 0
    gradient_method: GradientMethod = GradientMethod.ANALYTIC
    fd_step: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "gradient_method", GradientMethod.parse(self.gradient_method))
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be non-negative")
        if self.patience < 1 or self.eval_every < 1:
            raise ConfigurationError("patience and eval_every must be at least 1")
        if not 0 < self.fd_step <= 1e-2:
            raise ConfigurationError("fd_step must lie in (0, 1e-2]")


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    train_loss: float
    val_sum_rate: float


@dataclass
class TrainState:
    params: ModelParams
    pcfg: ProblemConfig
    m: np.ndarray = None
    v: np.ndarray = None
    iteration: int = 0
    best_val: float = -math.inf
    best_params: ModelParams = None
    history: list = field(default_factory=list)
    stale: int = 0

    def __post_init__(self):
        n = self.params.size
        if self.m is None:
            self.m = np.zeros(n)
        if self.v is None:
            self.v = np.zeros(n)
        if self.best_params is None:
            self.best_params = self.params


# -- loss and gradient ------------------------------------------------------


def _groups(batch):
    """Split a batch into stacks of equal shape, remembering sample order."""
    if isinstance(batch, np.ndarray) and batch.ndim == 5:
        return [(np.arange(len(batch)), batch)]
    by_shape = {}
    for k, H in enumerate(batch):
        H = np.asarray(H, dtype=np.float64)
        by_shape.setdefault(H.shape, []).append((k, H))
    return [(np.array([k for k, _ in items]), np.stack([H for _, H in items])) for items in by_shape.values()]


def _batch_size(batch):
    n = len(batch)
    if n == 0:
        raise ConfigurationError("batch must be non-empty")
    return n


def sample_sum_rates(batch, params, cfg):
    """Sum-rate of the network output for each sample, in batch order."""
    n = _batch_size(batch)
    out = np.empty(n)
    for idx, stack in _groups(batch):
        V, _ = unfolded_forward(stack, params, cfg)
        out[idx] = sum_rate(stack, V, cfg)
    return out


def _check_finite(rates):
    bad = np.flatnonzero(~np.isfinite(rates))
    if bad.size:
        raise TrainingError(f"non-finite sum-rate for sample {bad[0]}", sample=int(bad[0]))


def loss(batch, params: ModelParams, cfg: ProblemConfig) -> float:
    """Negative mean sum-rate of the network output over ``batch``."""
    rates = sample_sum_rates(batch, params, cfg)
    _check_finite(rates)
    return -float(np.mean(rates))


def _analytic(batch, params, cfg):
    n = _batch_size(batch)
    tracked = params.tracked()
    total = None
    for idx, stack in _groups(batch):
        V, _ = unfolded_forward(stack, tracked, cfg)
        rates = sum_rate(stack, V, cfg)
        rv = ad.value(rates)
        if not np.all(np.isfinite(rv)):
            k = int(np.flatnonzero(~np.isfinite(rv))[0])
            raise TrainingError(f"non-finite sum-rate for sample {idx[k]}", sample=int(idx[k]))
        part = ad.sum(rates)
        total = part if total is None else total + part
    objective = total * (-1.0 / n)
    objective.backward()
    grads = []
    for _, leaf in tracked.named_arrays():
        grads.append(np.zeros(leaf.shape) if leaf.grad is None else leaf.grad)
    return float(objective.value), np.concatenate([g.ravel() for g in grads])


def _finite_difference(batch, params, cfg, fd_step):
    theta = params.to_vector()
    grad = np.empty_like(theta)
    for k in range(theta.size):
        h = fd_step * max(1.0, abs(theta[k]))
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        grad[k] = (loss(batch, params.with_vector(up), cfg) - loss(batch, params.with_vector(down), cfg)) / (2 * h)
    return loss(batch, params, cfg), grad


def gradient(batch, params: ModelParams, cfg: ProblemConfig, method=GradientMethod.ANALYTIC, fd_step=1e-6):
    """Return ``(loss, grad)`` with ``grad`` laid out like ``params.to_vector()``."""
    method = GradientMethod.parse(method)
    if method is GradientMethod.ANALYTIC:
        value, grad = _analytic(batch, params, cfg)
    else:
        value, grad = _finite_difference(batch, params, cfg, fd_step)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        path = params.vector_paths()[bad[0]]
        raise TrainingError(f"non-finite gradient component {path}", parameter=path)
    return value, grad


# -- optimizer loop -----------------------------------------------------------


def adam_step(state: TrainState, grad, tcfg: TrainConfig):
    """One bias-corrected Adam update applied in place to ``state``."""
    t = state.iteration + 1
    state.m = tcfg.beta1 * state.m + (1 - tcfg.beta1) * grad
    state.v = tcfg.beta2 * state.v + (1 - tcfg.beta2) * grad * grad
    m_hat = state.m / (1 - tcfg.beta1**t)
    v_hat = state.v / (1 - tcfg.beta2**t)
    theta = state.params.to_vector() - tcfg.learning_rate * m_hat / (np.sqrt(v_hat) + tcfg.adam_eps)
    state.params = state.params.with_vector(theta)
    state.iteration = t


def batch_indices(n, batch_size, iteration, seed):
    """Sample indices for ``iteration``.

    The stream is the concatenation of per-epoch permutations drawn from
    ``SeedSequence([seed, epoch])``; batches wrap across epoch boundaries.
    """
    start = iteration * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng(np.random.SeedSequence([int(seed), epoch])).permutation(n)
        out.extend(perm[offset : offset + batch_size - len(out)].tolist())
    return out


def _take(dataset, idx):
    if isinstance(dataset, np.ndarray):
        return dataset[idx]
    return [dataset[k] for k in idx]


def mean_sum_rate(dataset, params, cfg, chunk=256):
    """Mean network sum-rate over a dataset, evaluated in chunks."""
    total, n = 0.0, len(dataset)
    for start in range(0, n, chunk):
        part = _take(dataset, list(range(start, min(n, start + chunk))))
        total += float(np.sum(sample_sum_rates(part, params, cfg)))
    return total / n


def _check_datasets(train_set, val_set, params, cfg):
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    for name, data in (("training", train_set), ("validation", val_set)):
        shapes = {np.shape(H)[-2:] for H in (data if not isinstance(data, np.ndarray) else data[:1])}
        for R, T in shapes:
            if (R, T) != params.omega.dims or cfg.d > min(R, T):
                raise ConfigurationError(
                    f"{name} set antennas (R={R}, T={T}) do not fit model {params.omega.dims} with d={cfg.d}"
                )


def train_state(train_set, val_set, state: TrainState, tcfg: TrainConfig, checkpoint_path=None, callback=None):
    """Continue optimizing ``state`` in place until ``tcfg.max_iters`` or early stop."""
    cfg = state.pcfg
    _check_datasets(train_set, val_set, state.params, cfg)
    n = len(train_set)
    last_loss = math.nan
    while state.iteration < tcfg.max_iters and state.stale < tcfg.patience:
        batch = _take(train_set, batch_indices(n, tcfg.batch_size, state.iteration, tcfg.seed))
        try:
            last_loss, grad = gradient(batch, state.params, cfg, tcfg.gradient_method, tcfg.fd_step)
        except TrainingError as exc:
            exc.state = state
            if checkpoint_path is not None:
                save_checkpoint(state, checkpoint_path)
            raise
        adam_step(state, grad, tcfg)
        if state.iteration % tcfg.eval_every == 0 or state.iteration == tcfg.max_iters:
            val = mean_sum_rate(val_set, state.params, cfg)
            if not math.isfinite(val):
                if checkpoint_path is not None:
                    save_checkpoint(state, checkpoint_path)
                raise TrainingError(f"validation sum-rate diverged at iteration {state.iteration}", state=state)
            state.history.append(HistoryEntry(state.iteration, last_loss, val))
            if val > state.best_val:
                state.best_val, state.best_params, state.stale = val, state.params, 0
            else:
                state.stale += 1
            log.info("iter %d loss %.6f val %.6f", state.iteration, last_loss, val)
            if callback is not None:
                callback(state)
    return state


def train(train_set, val_set, init_seed, tcfg: TrainConfig, pcfg: ProblemConfig, hidden=5, K=4, **kwargs):
    """Train from fresh parameters; returns ``(best_params, history)``."""
    R, T = np.shape(train_set[0])[-2:]
    params = init_params(R, T, hidden=hidden, K=K, seed=init_seed)
    state = train_state(train_set, val_set, TrainState(params, pcfg), tcfg, **kwargs)
    return state.best_params, state.history


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_loss", "val_sum_rate"])
        for e in history:
            w.writerow([e.iteration, repr(e.train_loss), repr(e.val_sum_rate)])


# -- checkpoints ------------------------------------------------------------


def _arr(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _unarr(d):
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.array(d["data"], dtype=np.float64)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad array entry: {exc}") from None


def _finite_or_none(x):
    return float(x) if math.isfinite(x) else None


def checkpoint_document(state):
    """JSON-ready dict for a :class:`TrainState` or bare :class:`ModelParams`."""
    if isinstance(state, ModelParams):
        state = TrainState(state, ProblemConfig())
    p = state.params
    R, T = p.omega.dims
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {"R": R, "T": T, "d": state.pcfg.d, "h": p.hidden, "K": p.K},
        "a_max": p.a_max,
        "b_max": p.b_max,
        "interference_mode": state.pcfg.interference_mode.value,
        "sigma": state.pcfg.sigma,
        "p_max": state.pcfg.p_max,
        "params": {path: _arr(a) for path, a in p.named_arrays()},
        "best_params": {path: _arr(a) for path, a in state.best_params.named_arrays()},
        "optimizer": {"m": _arr(state.m), "v": _arr(state.v)},
        "iteration": state.iteration,
        "best_val": _finite_or_none(state.best_val),
        "stale": state.stale,
        "history": [[e.iteration, e.train_loss, e.val_sum_rate] for e in state.history],
    }
    return doc


def save_checkpoint(state, path):
    Path(path).write_text(json.dumps(checkpoint_document(state), indent=1))


def load_checkpoint(path) -> TrainState:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: not a valid checkpoint ({exc.msg})") from None
    except UnicodeDecodeError:
        raise CheckpointFormatError(f"{path}: not a text checkpoint") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: not a uwmmse checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    try:
        dims = doc["dims"]
        h, K = int(dims["h"]), int(dims["K"])
        template = ModelParams(
            GcnParams.zeros(h),
            GcnParams.zeros(h),
            ReductionFilter(np.zeros((int(dims["R"]), int(dims["T"]))), np.zeros(())),
            K=K,
            a_max=float(doc["a_max"]),
            b_max=float(doc["b_max"]),
        )
        params = template.with_arrays({k: _unarr(v) for k, v in doc["params"].items()})
        best = template.with_arrays({k: _unarr(v) for k, v in doc["best_params"].items()})
        for loaded in (params, best):
            for (path, a), (_, ref) in zip(loaded.named_arrays(), template.named_arrays()):
                if np.shape(a) != np.shape(ref):
                    raise CheckpointFormatError(f"{path}: shape {np.shape(a)} != {np.shape(ref)}")
        pcfg = ProblemConfig(
            d=int(dims["d"]),
            sigma=float(doc["sigma"]),
            p_max=float(doc["p_max"]),
            interference_mode=InterferenceMode.parse(doc["interference_mode"]),
        )
        best_val = doc.get("best_val")
        state = TrainState(
            params,
            pcfg,
            m=_unarr(doc["optimizer"]["m"]),
            v=_unarr(doc["optimizer"]["v"]),
            iteration=int(doc["iteration"]),
            best_val=-math.inf if best_val is None else float(best_val),
            best_params=best,
            history=[HistoryEntry(int(i), float(l), float(s)) for i, l, s in doc["history"]],
            stale=int(doc.get("stale", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: malformed checkpoint ({exc})") from None
    if state.m.size != params.size or state.v.size != params.size:
        raise CheckpointFormatError(f"{path}: optimizer moments do not match parameter count")
    return state
