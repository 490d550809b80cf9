"""Random channel realizations and the binary dataset format.

All three families produce real, non-negative CSI tensors of shape
``(M, M, R, T)`` where entry ``[i, j, r, t]`` couples transmit antenna ``t``
of transmitter ``j`` to receive antenna ``r`` of receiver ``i``.

Randomness comes from numpy's PCG64 bit generator. Sample ``k`` of a dataset
is drawn from its own stream seeded with ``SeedSequence([seed, k])`` so the
output is fixed by ``(spec, seed, n)`` regardless of how samples are split
across workers.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigurationError,
    DatasetFormatError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"UWMD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")


class Family(str, enum.Enum):
    RAYLEIGH = "rayleigh"
    RICIAN = "rician"
    GEOMETRIC = "geometric"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ConfigurationError(f"unknown channel family {name!r}") from None


@dataclass(frozen=True)
class ChannelSpec:
    family: Family
    M: int
    T: int
    R: int
    rician_k_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        for name in ("M", "T", "R"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.family is Family.RICIAN and not math.isfinite(self.rician_k_db):
            raise ConfigurationError("rician_k_db must be finite for the Rician family")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in an unsigned 64-bit integer")

    @property
    def shape(self):
        return (self.M, self.M, self.R, self.T)


@dataclass(frozen=True)
class GeometricLayout:
    tx_positions: np.ndarray  # (M, 2)
    rx_positions: np.ndarray  # (M, 2)
    distances: np.ndarray  # (M, M), [i, j] = |rx_i - tx_j|


def sample_rng(seed, index):
    """Independent generator for sample ``index`` of a dataset."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _complex_magnitude(rng, shape):
    x = rng.standard_normal(shape)
    y = rng.standard_normal(shape)
    return np.hypot(x, y) / math.sqrt(2.0)


def pathloss(d):
    return 1.0 / (1.0 + np.square(d))


def _check(spec, family, n):
    if spec.family is not family:
        raise ConfigurationError(f"expected a {family.value} spec, got {spec.family.value}")
    if n < 0:
        raise ConfigurationError("sample count must be non-negative")


def generate_rayleigh(spec: ChannelSpec, n: int) -> np.ndarray:
    _check(spec, Family.RAYLEIGH, n)
    out = np.empty((n,) + spec.shape)
    for k in range(n):
        out[k] = _complex_magnitude(sample_rng(spec.seed, k), spec.shape)
    return out


def generate_rician(spec: ChannelSpec, n: int) -> np.ndarray:
    _check(spec, Family.RICIAN, n)
    K = 10.0 ** (spec.rician_k_db / 10.0)
    los = math.sqrt(K / (K + 1.0))
    scatter = math.sqrt(1.0 / (K + 1.0))
    out = np.empty((n,) + spec.shape)
    for k in range(n):
        rng = sample_rng(spec.seed, k)
        x = rng.standard_normal(spec.shape)
        y = rng.standard_normal(spec.shape)
        # line-of-sight term is the real constant 1
        out[k] = np.hypot(los + scatter * x / math.sqrt(2.0), scatter * y / math.sqrt(2.0))
    return out


def random_layout(M, rng) -> GeometricLayout:
    half = math.sqrt(M)
    tx = rng.uniform(-half, half, size=(M, 2))
    rx = rng.uniform(-half, half, size=(M, 2))
    dist = np.linalg.norm(rx[:, None, :] - tx[None, :, :], axis=-1)
    return GeometricLayout(tx, rx, dist)


def generate_geometric(spec: ChannelSpec, n: int):
    """Return ``(tensors, layouts)``; a fresh layout is dropped per sample."""
    _check(spec, Family.GEOMETRIC, n)
    out = np.empty((n,) + spec.shape)
    layouts = []
    for k in range(n):
        rng = sample_rng(spec.seed, k)
        layout = random_layout(spec.M, rng)
        fading = _complex_magnitude(rng, spec.shape)
        out[k] = pathloss(layout.distances)[:, :, None, None] * fading
        layouts.append(layout)
    return out, layouts


def generate(spec: ChannelSpec, n: int) -> np.ndarray:
    """Tensors for any family (geometric layouts are dropped)."""
    if spec.family is Family.RAYLEIGH:
        return generate_rayleigh(spec, n)
    if spec.family is Family.RICIAN:
        return generate_rician(spec, n)
    return generate_geometric(spec, n)[0]


def write_dataset(path, tensors, dims=None):
    """Write tensors to ``path``; ``dims=(M, R, T)`` is needed only when empty."""
    arr = np.asarray(tensors, dtype=np.float64)
    if arr.size == 0 and arr.ndim != 5:
        M, R, T = dims if dims is not None else (0, 0, 0)
        arr = np.empty((0, M, M, R, T))
    if arr.ndim != 5 or arr.shape[1] != arr.shape[2]:
        raise ConfigurationError(f"tensors must have shape (n, M, M, R, T), got {arr.shape}")
    n, M, _, R, T = arr.shape
    if dims is not None and tuple(dims) != (M, R, T):
        raise ConfigurationError(f"dims {tuple(dims)} disagree with tensor shape {arr.shape}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, M, R, T, n)
    payload = np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_dataset(path):
    """Return ``((M, R, T), tensors)`` with tensors shaped ``(n, M, M, R, T)``."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a UWMD dataset (bad magic bytes)")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(data)} bytes)")
    _, version, M, R, T, n = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: unsupported dataset version {version}")
    expected = n * M * M * R * T * 8
    payload = len(data) - _HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(f"{path}: payload has {payload} bytes, expected {expected}")
    if payload > expected:
        raise DatasetFormatError(f"{path}: {payload - expected} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=n * M * M * R * T)
    return (M, R, T), arr.astype(np.float64).reshape(n, M, M, R, T)
