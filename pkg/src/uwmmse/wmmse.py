"""Rates, closed-form block updates and the WMMSE solver.

Shapes (leading batch axes ``...`` broadcast everywhere):

* ``H``: ``(..., M, M, R, T)`` with ``H[..., i, j]`` the channel into receiver
  ``i`` from transmitter ``j``
* ``V``: ``(..., M, T, d)`` transmit beamformers
* ``U``: ``(..., M, R, d)`` receive beamformers
* ``W``: ``(..., M, d, d)`` MSE weights

The update functions are written against :mod:`uwmmse.autodiff` so they accept
either arrays or tracked variables.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DomainError, SingularityError

LN2 = math.log(2.0)


class InterferenceMode(str, enum.Enum):
    """Which transmitters enter the covariance sums of the U and V updates."""

    PAPER_EXCLUDE_SELF = "exclude-self"
    CLASSICAL_INCLUDE_SELF = "include-self"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        aliases = {
            "paper": cls.PAPER_EXCLUDE_SELF,
            "classical": cls.CLASSICAL_INCLUDE_SELF,
            "paperexcludeself": cls.PAPER_EXCLUDE_SELF,
            "classicalincludeself": cls.CLASSICAL_INCLUDE_SELF,
        }
        key = str(name).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown interference mode {name!r}") from None


@dataclass(frozen=True)
class ProblemConfig:
    d: int = 1
    sigma: float = 2.6e-5
    p_max: float = 1.0
    interference_mode: InterferenceMode = InterferenceMode.PAPER_EXCLUDE_SELF

    def __post_init__(self):
        object.__setattr__(self, "interference_mode", InterferenceMode.parse(self.interference_mode))
        if int(self.d) != self.d or self.d < 1:
            raise ConfigurationError(f"d must be a positive integer, got {self.d!r}")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        if not self.p_max > 0:
            raise ConfigurationError("p_max must be positive")

    @property
    def noise_var(self):
        return self.sigma**2

    def with_mode(self, mode):
        return replace(self, interference_mode=InterferenceMode.parse(mode))


@dataclass
class SolveTrace:
    sum_rates: list = field(default_factory=list)
    objectives: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.sum_rates)


def check_dims(H, V=None, cfg=None):
    """Validate shapes and return ``(M, R, T)``."""
    shape = np.shape(ad.value(H))
    if len(shape) < 4 or shape[-4] != shape[-3]:
        raise ConfigurationError(f"CSI tensor must have shape (..., M, M, R, T), got {shape}")
    M, _, R, T = shape[-4:]
    if cfg is not None and cfg.d > min(R, T):
        raise ConfigurationError(f"d={cfg.d} exceeds min(R, T)={min(R, T)}")
    if V is not None:
        vs = np.shape(ad.value(V))
        if len(vs) < 3 or vs[-3:-1] != (M, T) or (cfg is not None and vs[-1] != cfg.d):
            raise ConfigurationError(f"beamformer shape {vs} does not match M={M}, T={T}")
    return M, R, T


def initial_beamformers(M, T, d, p_max, batch_shape=()):
    """All-equal start ``sqrt(P_max) * ones(T, d)`` for every user.

    This exceeds the power budget when ``T * d > 1``; the first V-update
    projects it back.
    """
    return np.full(tuple(batch_shape) + (M, T, d), math.sqrt(p_max))


def _eye(n):
    return np.eye(n)


def _per_pair(H, V):
    """``G[..., i, j] = H_ij V_j`` with shape ``(..., M, M, R, d)``."""
    vshape = np.shape(ad.value(V))
    Vj = ad.reshape(V, vshape[:-3] + (1,) + vshape[-3:])
    return H @ Vj


def _mask(M, mode):
    if mode is InterferenceMode.CLASSICAL_INCLUDE_SELF:
        return np.ones((M, M, 1, 1))
    return (1.0 - _eye(M))[:, :, None, None]


def _diag_blocks(X):
    """Pick ``X[..., i, i, :, :]`` from a ``(..., M, M, a, b)`` stack."""
    M = np.shape(ad.value(X))[-4]
    return ad.sum(X * _eye(M)[:, :, None, None], axis=-3)


def _covariances(H, V):
    G = _per_pair(H, V)
    return G, G @ ad.mT(G)


def update_u(H, V_prev, cfg: ProblemConfig):
    """MMSE-style receive beamformers ``(C_i + sigma^2 I)^{-1} H_ii V_i``."""
    M, R, _ = check_dims(H, V_prev, cfg)
    G, cov = _covariances(H, V_prev)
    C = ad.sum(cov * _mask(M, cfg.interference_mode), axis=-3)
    return ad.solve(C + cfg.noise_var * _eye(R), _diag_blocks(G))


def update_w(H, V_prev, U, a, b):
    """``W_i = a_i (I - U_i^T H_ii V_i)^{-1} + b_i I``.

    ``a`` and ``b`` are per-user arrays of shape ``(..., M)`` or scalars.
    """
    G = _per_pair(H, V_prev)
    d = np.shape(ad.value(U))[-1]
    X = _eye(d) - ad.mT(U) @ _diag_blocks(G)
    try:
        Xinv = ad.inv(X)
    except np.linalg.LinAlgError:
        user = _first_singular(ad.value(X))
        raise SingularityError(f"I - U^T H V is singular for user {user}", user=user) from None
    a = ad.reshape(a, np.shape(ad.value(a)) + (1, 1)) if np.ndim(ad.value(a)) else a
    b = ad.reshape(b, np.shape(ad.value(b)) + (1, 1)) if np.ndim(ad.value(b)) else b
    return a * Xinv + b * _eye(d)


def _first_singular(X):
    flat = X.reshape((-1,) + X.shape[-3:])
    for stack in flat:
        for i, m in enumerate(stack):
            if np.linalg.matrix_rank(m) < m.shape[0]:
                return i
    return None


def beta_project(A, p_max):
    """Scale each trailing matrix onto the Frobenius ball of radius sqrt(p_max).

    Matrices already inside are untouched. On the boundary the scaling branch
    is taken, which fixes the derivative convention there.
    """
    norm2 = ad.sum(A * A, axis=(-2, -1), keepdims=True)
    active = ad.value(norm2) >= p_max
    return A * ad.sqrt(p_max / ad.where(active, norm2, p_max))


def update_v(H, U, W, cfg: ProblemConfig):
    """``V_i = beta((A_i + mu_i I)^{-1} H_ii^T U_i W_i)``.

    ``A_i = sum_j H_ji^T U_j W_j U_j^T H_ji`` collects the interference that
    transmitter ``i`` causes at every receiver ``j`` (``j != i`` in the
    exclude-self mode). A ridge ``lam * I`` with
    ``lam = 1e-12 * (1 + tr(A_i) / max(1, T d))`` keeps the solve total.

    In exclude-self mode ``mu_i = 0`` and ``beta`` alone enforces the power
    budget. In include-self mode ``mu_i >= 0`` is the Lagrange multiplier of
    the per-user power constraint, which makes the step the exact minimizer
    of the WMMSE surrogate over ``V``; ``beta`` then only removes rounding
    excess.
    """
    M, R, T = check_dims(H)
    d = np.shape(ad.value(U))[-1]
    Q = U @ W @ ad.mT(U)  # (..., M, R, R), indexed by receiver j
    qshape = np.shape(ad.value(Q))
    Qj = ad.reshape(Q, qshape[:-3] + (1,) + qshape[-3:])
    Hs = _swap_pairs(H)  # Hs[i, j] = H_ji
    F = ad.mT(Hs) @ Qj @ Hs
    A = ad.sum(F * _mask(M, cfg.interference_mode), axis=-3)
    trace = ad.sum(A * _eye(T), axis=(-2, -1), keepdims=True)
    lam = 1e-12 * (1.0 + trace / max(1, T * d))
    B = ad.mT(_diag_blocks(H)) @ U @ W
    if cfg.interference_mode is InterferenceMode.CLASSICAL_INCLUDE_SELF:
        A_sym = 0.5 * (A + ad.mT(A))
        X = power_constrained_solve(A_sym + lam * _eye(T), B, cfg.p_max)
    else:
        X = ad.solve(A + lam * _eye(T), B)
    return beta_project(X, cfg.p_max)


def _multiplier(eigvals, c, p_max, max_iter=60):
    """Smallest ``mu >= 0`` with ``sum_k c_k / (l_k + mu)^2 <= p_max``.

    Newton on ``1/||x(mu)|| - 1/sqrt(p_max)``, which is concave and increasing
    in ``mu``, so iterates started left of the root rise monotonically to it.
    """
    lo = np.maximum(0.0, -eigvals[..., 0])
    lo = lo + 1e-300 + 1e-15 * np.abs(lo)

    def norm2(mu):
        return np.sum(c / (eigvals + mu[..., None]) ** 2, axis=-1)

    active = norm2(np.where(eigvals[..., 0] > 0, 0.0, lo)) > p_max
    mu = np.where(active, lo, 0.0)
    target = 1.0 / math.sqrt(p_max)
    for _ in range(max_iter):
        den = eigvals + mu[..., None]
        n2 = np.sum(c / den**2, axis=-1)
        dn2 = -2.0 * np.sum(c / den**3, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            n = np.sqrt(n2)
            g = 1.0 / n - target
            dg = -0.5 * dn2 / (n2 * n)
        ok = active & (dg > 0) & np.isfinite(g)
        step = np.where(ok, -g / np.where(ok, dg, 1.0), 0.0)
        mu = np.maximum(mu + step, mu)
        if np.all(np.abs(step) <= 1e-15 * np.maximum(mu, 1e-300)):
            break
    return mu, active


def power_constrained_solve(A, B, p_max):
    """``X = (A + mu I)^{-1} B`` with the per-matrix multiplier ``mu``.

    ``A`` must be symmetric positive semidefinite. ``mu = 0`` when the plain
    solve already satisfies ``||X||_F^2 <= p_max``; otherwise ``mu > 0`` puts
    ``X`` on the boundary. The VJP differentiates through ``mu`` implicitly.
    """
    Av, Bv = ad.value(A), ad.value(B)
    n = Av.shape[-1]
    eigvals, Qe = np.linalg.eigh(Av)
    c = np.sum((np.swapaxes(Qe, -1, -2) @ Bv) ** 2, axis=-1)
    mu, active = _multiplier(eigvals, c, p_max)
    shifted = Av + mu[..., None, None] * np.eye(n)
    X = np.linalg.solve(shifted, Bv)
    if not (isinstance(A, ad.Var) or isinstance(B, ad.Var)):
        return X
    cache = {}

    def adjoint(g):
        if "gB" not in cache:
            Y = np.linalg.solve(shifted, g)
            Z = np.linalg.solve(shifted, X)
            ratio = np.sum(Y * X, axis=(-2, -1), keepdims=True) / np.sum(Z * X, axis=(-2, -1), keepdims=True)
            cache["gB"] = Y - np.where(active[..., None, None], ratio, 0.0) * Z
        return cache["gB"]

    return ad.node(
        X,
        (A, lambda g: -adjoint(g) @ np.swapaxes(X, -1, -2)),
        (B, adjoint),
    )


def _swap_pairs(H):
    nd = np.ndim(ad.value(H))
    return ad.transpose(H, list(range(nd - 4)) + [nd - 3, nd - 4, nd - 2, nd - 1])


def user_rates(H, V, cfg: ProblemConfig, form="full"):
    """Per-user rates in bits, shape ``(..., M)``.

    ``form="full"`` evaluates ``log2 det(I_R + N_i^{-1} S_i)``; ``"sylvester"``
    uses the equivalent ``d x d`` determinant.
    """
    M, R, _ = check_dims(H, V, cfg)
    G, cov = _covariances(H, V)
    N = ad.sum(cov * (1.0 - _eye(M))[:, :, None, None], axis=-3) + cfg.noise_var * _eye(R)
    if form == "full":
        S = _diag_blocks(cov)
        return ad.logdet(_eye(R) + ad.solve(N, S)) / LN2
    if form == "sylvester":
        HV = _diag_blocks(G)
        d = np.shape(ad.value(HV))[-1]
        return ad.logdet(_eye(d) + ad.mT(HV) @ ad.solve(N, HV)) / LN2
    raise ValueError(f"unknown rate form {form!r}")


def user_rate(H, V, i, cfg: ProblemConfig):
    M, _, _ = check_dims(H, V)
    if not 0 <= i < M:
        raise ConfigurationError(f"user index {i} out of range for M={M}")
    return ad.value(user_rates(H, V, cfg))[..., i]


def sum_rate(H, V, cfg: ProblemConfig):
    return ad.sum(user_rates(H, V, cfg), axis=-1)


def mse_matrices(H, V, U, cfg: ProblemConfig):
    """MSE matrix ``E_i`` of the linear receiver ``U_i`` for every user."""
    M, R, _ = check_dims(H, V)
    raise_if_tracked(H, V, U)
    G, cov = _covariances(H, V)
    residual = _eye(U.shape[-1]) - np.swapaxes(U, -1, -2) @ _diag_blocks(G)
    N = np.sum(cov * (1.0 - _eye(M))[:, :, None, None], axis=-3) + cfg.noise_var * _eye(R)
    return residual @ np.swapaxes(residual, -1, -2) + np.swapaxes(U, -1, -2) @ N @ U


def raise_if_tracked(*xs):
    if any(isinstance(x, ad.Var) for x in xs):
        raise TypeError("this diagnostic works on plain arrays only")


def wmmse_objective(H, V, U, W, cfg: ProblemConfig):
    """Surrogate ``sum_i Tr(W_i E_i) - log det W_i`` (natural log)."""
    M, R, _ = check_dims(H, V, cfg)
    raise_if_tracked(H, V, U, W)
    E = mse_matrices(H, V, U, cfg)
    Wsym = 0.5 * (W + np.swapaxes(W, -1, -2))
    try:
        np.linalg.cholesky(Wsym)
    except np.linalg.LinAlgError:
        raise DomainError("weight matrices must be positive definite") from None
    _, logdet_w = np.linalg.slogdet(Wsym)
    tr = np.trace(W @ E, axis1=-2, axis2=-1)
    return np.sum(tr - logdet_w, axis=-1)


def bcd_sweep(H, V, cfg: ProblemConfig, a=1.0, b=0.0):
    """One U, W, V pass; returns ``(U, W, V_new)``."""
    U = update_u(H, V, cfg)
    W = update_w(H, V, U, a, b)
    return U, W, update_v(H, U, W, cfg)


def wmmse_solve(
    H,
    cfg: ProblemConfig,
    max_iters=100,
    tol=1e-6,
    interference_mode=InterferenceMode.CLASSICAL_INCLUDE_SELF,
    record_objective=False,
):
    """Classical WMMSE by block coordinate descent.

    Stops when the relative sum-rate change falls below ``tol`` or after
    ``max_iters`` sweeps. Pass ``tol=0`` for a fixed iteration count.
    Returns ``(V, SolveTrace)``.
    """
    if max_iters < 1:
        raise ConfigurationError("max_iters must be at least 1")
    H = np.asarray(H, dtype=np.float64)
    M, R, T = check_dims(H, cfg=cfg)
    if interference_mode is not None:
        cfg = cfg.with_mode(interference_mode)
    V = initial_beamformers(M, T, cfg.d, cfg.p_max, H.shape[:-4])
    trace = SolveTrace()
    prev = None
    for _ in range(max_iters):
        U, W, V = bcd_sweep(H, V, cfg)
        rate = sum_rate(H, V, cfg)
        trace.sum_rates.append(rate)
        if record_objective:
            trace.objectives.append(wmmse_objective(H, V, U, W, cfg))
        if prev is not None and np.all(np.abs(rate - prev) <= tol * np.maximum(np.abs(prev), 1e-300)):
            break
        prev = rate
    return V, trace
