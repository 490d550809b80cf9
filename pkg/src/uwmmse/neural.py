"""Learnable parts of the unfolded network.

The CSI tensor is first reduced to an ``M x M`` weighted adjacency matrix by a
shared ``1x1`` filter over the ``R*T`` antenna coefficients. Two small graph
convolutional networks read that matrix and emit the per-user affine weights
``a`` (scale) and ``b`` (shift) used in every unfolded W-update. One pair of
networks is shared by all layers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError
from .wmmse import (
    ProblemConfig,
    beta_project,
    check_dims,
    initial_beamformers,
    sum_rate,
    update_u,
    update_v,
    update_w,
)

__all__ = [
    "GcnParams",
    "ModelParams",
    "ReductionFilter",
    "beta_project",
    "gcn_forward",
    "init_params",
    "parameter_census",
    "reduce_channel",
    "unfolded_forward",
]

A_EPS = 1e-3


@dataclass(frozen=True)
class ReductionFilter:
    weights: np.ndarray  # (R, T); flattened it has R*T entries in (r, t) order
    bias: np.ndarray  # scalar, shape ()

    @property
    def dims(self):
        return tuple(np.shape(ad.value(self.weights)))

    @property
    def size(self):
        return int(np.size(ad.value(self.weights))) + 1


@dataclass(frozen=True)
class GcnParams:
    """Two graph-convolution layers with widths ``1 -> h -> 1``."""

    w_self1: np.ndarray  # (1, h)
    w_nbr1: np.ndarray  # (1, h)
    bias1: np.ndarray  # (h,)
    w_self2: np.ndarray  # (h, 1)
    w_nbr2: np.ndarray  # (h, 1)
    bias2: np.ndarray  # (1,)

    @property
    def hidden(self):
        return int(np.shape(ad.value(self.w_self1))[1])

    @property
    def size(self):
        return sum(int(np.size(ad.value(getattr(self, f.name)))) for f in fields(self))

    @classmethod
    def zeros(cls, h):
        return cls(
            np.zeros((1, h)), np.zeros((1, h)), np.zeros(h), np.zeros((h, 1)), np.zeros((h, 1)), np.zeros(1)
        )


@dataclass(frozen=True)
class ModelParams:
    theta_a: GcnParams
    theta_b: GcnParams
    omega: ReductionFilter
    K: int = 4
    a_max: float = 2.0
    b_max: float = 2.0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError("K must be at least 1")
        if not self.a_max > A_EPS:
            raise ConfigurationError(f"a_max must exceed {A_EPS}")
        if self.b_max < 0:
            raise ConfigurationError("b_max must be non-negative")

    @property
    def hidden(self):
        return self.theta_a.hidden

    def named_arrays(self):
        """Ordered ``(path, array)`` pairs for every trainable tensor."""
        out = []
        for head in ("theta_a", "theta_b"):
            gcn = getattr(self, head)
            out += [(f"{head}.{f.name}", getattr(gcn, f.name)) for f in fields(gcn)]
        out += [("omega.weights", self.omega.weights), ("omega.bias", self.omega.bias)]
        return out

    def with_arrays(self, arrays):
        """Copy with tensors replaced from a ``{path: array}`` mapping."""
        parts = {"theta_a": {}, "theta_b": {}, "omega": {}}
        for path, arr in self.named_arrays():
            owner, name = path.split(".")
            parts[owner][name] = arrays.get(path, arr)
        return replace(
            self,
            theta_a=GcnParams(**parts["theta_a"]),
            theta_b=GcnParams(**parts["theta_b"]),
            omega=ReductionFilter(**parts["omega"]),
        )

    def to_vector(self):
        return np.concatenate([np.ravel(ad.value(a)) for _, a in self.named_arrays()])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ConfigurationError(f"parameter vector has {vec.size} entries, expected {self.size}")
        arrays, pos = {}, 0
        for path, arr in self.named_arrays():
            shape = np.shape(ad.value(arr))
            n = int(np.prod(shape, dtype=int))
            arrays[path] = vec[pos : pos + n].reshape(shape).copy()
            pos += n
        return self.with_arrays(arrays)

    def vector_paths(self):
        """Human-readable path of every entry of :meth:`to_vector`."""
        paths = []
        for path, arr in self.named_arrays():
            shape = np.shape(ad.value(arr))
            paths += [f"{path}{list(idx)}" if idx else path for idx in np.ndindex(*shape)]
        return paths

    def tracked(self):
        """Copy whose tensors are fresh :class:`~uwmmse.autodiff.Var` leaves."""
        return self.with_arrays({p: ad.Var(a, name=p) for p, a in self.named_arrays()})

    @property
    def size(self):
        return self.theta_a.size + self.theta_b.size + self.omega.size


def init_params(R, T, hidden=5, K=4, seed=0, a_max=2.0, b_max=2.0):
    """Fresh parameters.

    Graph weights are uniform in ``+-1/sqrt(fan_in)``, biases zero, and the
    reduction filter starts as the plain average of the antenna coefficients.
    """
    rng = np.random.default_rng(seed)

    def gcn():
        u1 = 1.0
        u2 = 1.0 / np.sqrt(hidden)
        return GcnParams(
            w_self1=rng.uniform(-u1, u1, (1, hidden)),
            w_nbr1=rng.uniform(-u1, u1, (1, hidden)),
            bias1=np.zeros(hidden),
            w_self2=rng.uniform(-u2, u2, (hidden, 1)),
            w_nbr2=rng.uniform(-u2, u2, (hidden, 1)),
            bias2=np.zeros(1),
        )

    omega = ReductionFilter(np.full((R, T), 1.0 / (R * T)), np.zeros(()))
    return ModelParams(gcn(), gcn(), omega, K=K, a_max=a_max, b_max=b_max)


def parameter_census(params: ModelParams):
    """Trainable-scalar counts from the tensors and from the closed forms.

    ``paper_formula`` is the quoted closed form ``12h + RT + 6``; the layer form used here gives
    ``5h + 1`` per network, so the two disagree.
    """
    h = params.hidden
    rt = int(np.size(ad.value(params.omega.weights)))
    per_gcn = params.theta_a.size
    return {
        "total": params.size,
        "per_gcn": per_gcn,
        "per_gcn_formula": 5 * h + 1,
        "reduction": params.omega.size,
        "total_formula": 2 * (5 * h + 1) + rt + 1,
        "paper_per_gcn": 6 * h + 2,
        "paper_formula": 12 * h + rt + 6,
    }


def reduce_channel(H, omega: ReductionFilter):
    """Return ``(raw, normalized)`` reduced channel matrices ``(..., M, M)``.

    ``raw[i, j] = sum_rt w_rt H[i, j, r, t] + bias``. ``normalized`` divides
    each row of ``|raw|`` by its sum; all-zero rows are left as they are.
    """
    R, T = np.shape(ad.value(H))[-2:]
    if omega.dims != (R, T):
        raise ConfigurationError(f"reduction filter is {omega.dims}, channel antennas are (R, T)={(R, T)}")
    raw = ad.sum(H * omega.weights, axis=(-2, -1)) + omega.bias
    mag = ad.absolute(raw)
    rows = ad.sum(mag, axis=-1, keepdims=True)
    return raw, mag / ad.where(ad.value(rows) > 0, rows, 1.0)


def gcn_forward(hbar, x, params: GcnParams):
    """Raw per-node scores ``(..., M)`` from node features ``x`` ``(..., M)``.

    Each layer computes ``act(X W_self + hbar X W_nbr + bias)``; the hidden
    activation is a rectifier and the output layer is linear.
    """
    X = ad.reshape(x, np.shape(ad.value(x)) + (1,))
    X = ad.relu(X @ params.w_self1 + hbar @ X @ params.w_nbr1 + params.bias1)
    out = X @ params.w_self2 + hbar @ X @ params.w_nbr2 + params.bias2
    return ad.reshape(out, np.shape(ad.value(out))[:-1])


def a_head(z, a_max):
    """Map scores into ``(A_EPS, a_max)``."""
    return A_EPS + (a_max - A_EPS) * ad.sigmoid(z)


def b_head(z, b_max):
    """Map scores into ``(0, b_max)``."""
    return b_max * ad.sigmoid(z)


def node_features(raw):
    """Direct-link scalar of each user, the diagonal of the raw reduction."""
    M = np.shape(ad.value(raw))[-1]
    return ad.sum(raw * np.eye(M), axis=-1)


def affine_weights(H, params: ModelParams):
    """Per-user ``(a, b)`` for the W-update, each shaped ``(..., M)``."""
    raw, hbar = reduce_channel(H, params.omega)
    x = node_features(raw)
    a = a_head(gcn_forward(hbar, x, params.theta_a), params.a_max)
    b = b_head(gcn_forward(hbar, x, params.theta_b), params.b_max)
    return a, b


def unfolded_forward(H, params: ModelParams, cfg: ProblemConfig, trace=False):
    """Run the ``K``-layer unfolded network.

    ``a`` and ``b`` depend only on ``H`` and the shared weights, so they are
    computed once and reused by every layer. Returns ``(V, layer_rates)``
    where ``layer_rates`` holds the sum-rate after each layer when ``trace``
    is set and is empty otherwise.
    """
    M, R, T = check_dims(H, cfg=cfg)
    a, b = affine_weights(H, params)
    V = initial_beamformers(M, T, cfg.d, cfg.p_max, np.shape(ad.value(H))[:-4])
    rates = []
    for _ in range(params.K):
        U = update_u(H, V, cfg)
        W = update_w(H, V, U, a, b)
        V = update_v(H, U, W, cfg)
        if trace:
            rates.append(sum_rate(ad.value(H), ad.value(V), cfg))
    return V, rates
