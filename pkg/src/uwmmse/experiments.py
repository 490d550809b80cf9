"""Benchmark harness: WMMSE vs truncated WMMSE vs the unfolded network.

Each method is timed per sample around the allocation call only, after one
untimed warm-up call, using :func:`time.perf_counter`. Records can be written
to CSV and reduced to box-plot summary statistics.
"""

from __future__ import annotations

import csv
import enum
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelSpec, Family, generate
from .errors import ConfigurationError
from .neural import ModelParams, unfolded_forward
from .wmmse import ProblemConfig, check_dims, sum_rate, wmmse_solve

RESULT_COLUMNS = ["sample_id", "method", "M", "T", "R", "d", "family", "sum_rate_bits", "wall_time_s", "iters"]
SUMMARY_COLUMNS = ["method", "mean", "std", "q1", "median", "q3", "n"]


class Method(str, enum.Enum):
    WMMSE = "WMMSE"
    TR_WMMSE = "TrWMMSE"
    UWMMSE = "UWMMSE"


@dataclass
class RunRecord:
    sample_id: int
    method: Method
    sum_rate: float
    wall_time: float
    iterations: int
    M: int
    T: int
    R: int
    d: int
    family: str = ""
    model: str = ""  # training family / checkpoint label for grouped runs
    V: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.method = Method(self.method)
        if self.sum_rate < -1e-9:
            raise ValueError(f"negative sum-rate {self.sum_rate} for sample {self.sample_id}")
        if self.wall_time < 0:
            raise ValueError("wall_time must be non-negative")

    def row(self):
        return {
            "sample_id": self.sample_id,
            "method": self.method.value,
            "M": self.M,
            "T": self.T,
            "R": self.R,
            "d": self.d,
            "family": self.family,
            "sum_rate_bits": repr(float(self.sum_rate)),
            "wall_time_s": repr(float(self.wall_time)),
            "iters": self.iterations,
        }


@dataclass(frozen=True)
class Summary:
    method: str
    mean: float
    std: float
    q1: float
    median: float
    q3: float
    n: int
    whisker_low: float
    whisker_high: float
    mean_time: float
    median_time: float


@dataclass(frozen=True)
class SweepSpec:
    sizes: tuple
    train_sizes: tuple = ()
    train_families: tuple = (Family.GEOMETRIC,)
    test_families: tuple = (Family.GEOMETRIC,)
    T: int = 3
    R: int = 3
    n_samples: int = 64
    seed: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))
        object.__setattr__(self, "train_sizes", tuple(int(m) for m in self.train_sizes))
        object.__setattr__(self, "train_families", tuple(Family.parse(f) for f in self.train_families))
        object.__setattr__(self, "test_families", tuple(Family.parse(f) for f in self.test_families))
        if not self.sizes or any(m < 1 for m in self.sizes):
            raise ConfigurationError("sweep sizes must be a non-empty list of positive integers")
        if any(m < 1 for m in self.train_sizes):
            raise ConfigurationError("train sizes must be positive")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be at least 1")


def odd_sizes(lo, hi):
    """Odd integers in ``[lo, hi]``, the interpolation training grid."""
    return tuple(m for m in range(lo, hi + 1) if m % 2 == 1)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _runners(params, cfg, wmmse_iters, trunc_iters, tol):
    def run_wmmse(h):
        V, trace = wmmse_solve(h, cfg, max_iters=wmmse_iters, tol=tol)
        return V, trace.iterations

    def run_trunc(h):
        V, trace = wmmse_solve(h, cfg, max_iters=trunc_iters, tol=0.0)
        return V, trace.iterations

    def run_unfolded(h):
        V, _ = unfolded_forward(h[None], params, cfg)
        return V[0], params.K

    out = {Method.WMMSE: run_wmmse, Method.TR_WMMSE: run_trunc}
    if params is not None:
        out[Method.UWMMSE] = run_unfolded
    return out


def compare_methods(
    test_set,
    params: ModelParams | None,
    cfg: ProblemConfig,
    wmmse_iters=100,
    trunc_iters=4,
    family="",
    methods=None,
    tol=1e-6,
    threads=1,
    return_outputs=False,
    model="",
):
    """One :class:`RunRecord` per (sample, method).

    ``params=None`` runs only the two WMMSE baselines. The WMMSE reference
    stops early once the relative sum-rate change drops below ``tol``; the
    truncated variant always runs exactly ``trunc_iters`` sweeps. With
    ``threads > 1`` samples are spread over a thread pool, which makes the
    wall-time columns contention-dependent.
    """
    test_set = np.asarray(test_set, dtype=np.float64)
    if test_set.ndim != 5:
        raise ConfigurationError(f"test set must have shape (n, M, M, R, T), got {test_set.shape}")
    M, R, T = check_dims(test_set[0], cfg=cfg) if len(test_set) else (test_set.shape[1], *test_set.shape[3:])
    if params is not None and params.omega.dims != (R, T):
        raise ConfigurationError(
            f"checkpoint expects (R, T)={params.omega.dims} but test data has (R, T)={(R, T)}"
        )
    runners = _runners(params, cfg, wmmse_iters, trunc_iters, tol)
    if methods is not None:
        runners = {Method(m): runners[Method(m)] for m in methods}
    if len(test_set) == 0:
        return []
    for run in runners.values():  # warm-up, excluded from statistics
        run(test_set[0])

    def one(k):
        h = test_set[k]
        recs = []
        for method, run in runners.items():
            (V, iters), dt = _timed(lambda: run(h))
            recs.append(
                RunRecord(
                    sample_id=k,
                    method=method,
                    sum_rate=float(sum_rate(h, V, cfg)),
                    wall_time=dt,
                    iterations=int(iters),
                    M=M,
                    T=T,
                    R=R,
                    d=cfg.d,
                    family=Family.parse(family).value if family else "",
                    model=model,
                    V=V if return_outputs else None,
                )
            )
        return recs

    return [r for recs in _pmap(one, range(len(test_set)), threads) for r in recs]


def _whiskers(x, q1, q3):
    lo_fence, hi_fence = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    return float(inside.min()), float(inside.max())


def summarize(records):
    """Per-method :class:`Summary`, in first-appearance order."""
    order = list(dict.fromkeys(Method(r.method) for r in records))
    out = []
    for method in order:
        rates = np.array([r.sum_rate for r in records if Method(r.method) is method])
        times = np.array([r.wall_time for r in records if Method(r.method) is method])
        q1, med, q3 = np.percentile(rates, [25, 50, 75])
        lo, hi = _whiskers(rates, q1, q3)
        out.append(
            Summary(
                method=method.value,
                mean=float(rates.mean()),
                std=float(rates.std(ddof=1)) if rates.size > 1 else 0.0,
                q1=float(q1),
                median=float(med),
                q3=float(q3),
                n=int(rates.size),
                whisker_low=lo,
                whisker_high=hi,
                mean_time=float(times.mean()),
                median_time=float(np.median(times)),
            )
        )
    return out


def speedup(records, reference=Method.WMMSE, target=Method.UWMMSE):
    """``mean(reference time) / mean(target time)``."""
    t = {m: np.mean([r.wall_time for r in records if Method(r.method) is m]) for m in (reference, target)}
    return float(t[reference] / t[target])


def write_results(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def write_summary(summaries, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow([s.method] + [repr(float(getattr(s, c))) for c in SUMMARY_COLUMNS[1:-1]] + [s.n])


def read_results(path):
    """Rows of a results CSV with numeric columns converted."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("sample_id", "M", "T", "R", "d", "iters"):
            row[key] = int(row[key])
        for key in ("sum_rate_bits", "wall_time_s"):
            row[key] = float(row[key])
    return rows


def _relabel(records, model):
    return [RunRecord(**{**r.__dict__, "model": model}) for r in records]


def robustness_cross_distribution(models, test_sets, cfg, threads=1, **kwargs):
    """Evaluate every trained model on every test family.

    ``models`` maps a training-family label to parameters and ``test_sets``
    maps a family to an ``(n, M, M, R, T)`` array. Returns
    ``{(model_label, test_family): records}``; each group contains the
    model's UWMMSE records plus the WMMSE and truncated-WMMSE reference
    records for that test set, which are computed once per family.
    """
    groups = {}
    for fam, data in test_sets.items():
        fam = Family.parse(fam).value
        base = compare_methods(data, None, cfg, family=fam, threads=threads, **kwargs)
        for label, params in models.items():
            label = Family.parse(label).value if isinstance(label, Family) else str(label)
            own = compare_methods(
                data, params, cfg, family=fam, methods=[Method.UWMMSE], threads=threads, model=label, **kwargs
            )
            groups[(label, fam)] = _relabel(base, label) + own
    return groups


def size_sweep(params_by_family, spec: SweepSpec, cfg: ProblemConfig, threads=1, **kwargs):
    """Evaluate one checkpoint per family at every size in ``spec.sizes``.

    A fresh test set is generated per ``(family, M)`` from ``spec.seed``
    offset by ``M`` so that sizes draw independent samples. Returns
    ``{(model_label, test_family, M): records}``.
    """
    groups = {}
    for fam in spec.test_families:
        for M in spec.sizes:
            data = generate(ChannelSpec(fam, M, spec.T, spec.R, seed=spec.seed + M), spec.n_samples)
            base = compare_methods(data, None, cfg, family=fam, threads=threads, **kwargs)
            for label, params in params_by_family.items():
                label = Family.parse(label).value if isinstance(label, Family) else str(label)
                own = compare_methods(
                    data, params, cfg, family=fam, methods=[Method.UWMMSE], threads=threads, model=label, **kwargs
                )
                groups[(label, fam.value, M)] = _relabel(base, label) + own
    return groups


def group_means(records):
    """``{method: mean sum-rate}`` of a record list."""
    return {s.method: s.mean for s in summarize(records)}
