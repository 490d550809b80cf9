"""Minimal array-level reverse-mode differentiation on top of numpy.

Every op accepts plain ``ndarray`` inputs as well as :class:`Var`. When none
of the inputs is a ``Var`` the op returns a plain array and records nothing,
so the same forward code serves fast inference and gradient computation.
Batched matrix ops follow numpy broadcasting over leading axes.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph holding an ndarray value."""

    __slots__ = ("value", "grad", "_parents", "name")
    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    def __init__(self, value, parents=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents  # tuple of (Var, vjp) pairs
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable Var."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                key = id(parent)
                grads[key] = contrib if key not in grads else grads[key] + contrib


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tracked(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def node(out, *links):
    """Wrap ``out`` as a Var whose tracked inputs get ``vjp(g)`` on backward."""
    parents = tuple((p, f) for p, f in links if isinstance(p, Var))
    return Var(out, parents)


def _mT(a):
    return np.swapaxes(a, -1, -2)


def add(x, y):
    xv, yv = value(x), value(y)
    out = xv + yv
    if not _tracked(x, y):
        return out
    return node(out, (x, lambda g: _unbroadcast(g, xv.shape)), (y, lambda g: _unbroadcast(g, yv.shape)))


def sub(x, y):
    xv, yv = value(x), value(y)
    out = xv - yv
    if not _tracked(x, y):
        return out
    return node(out, (x, lambda g: _unbroadcast(g, xv.shape)), (y, lambda g: -_unbroadcast(g, yv.shape)))


def mul(x, y):
    xv, yv = value(x), value(y)
    out = xv * yv
    if not _tracked(x, y):
        return out
    return node(out, (x, lambda g: _unbroadcast(g * yv, xv.shape)), (y, lambda g: _unbroadcast(g * xv, yv.shape)))


def div(x, y):
    xv, yv = value(x), value(y)
    out = xv / yv
    if not _tracked(x, y):
        return out
    return node(
        out,
        (x, lambda g: _unbroadcast(g / yv, xv.shape)),
        (y, lambda g: _unbroadcast(-g * out / yv, yv.shape)),
    )


def matmul(x, y):
    xv, yv = value(x), value(y)
    out = xv @ yv
    if not _tracked(x, y):
        return out
    return node(
        out,
        (x, lambda g: _unbroadcast(g @ _mT(yv), xv.shape)),
        (y, lambda g: _unbroadcast(_mT(xv) @ g, yv.shape)),
    )


def mT(x):
    """Transpose of the last two axes."""
    xv = value(x)
    out = _mT(xv)
    if not _tracked(x):
        return out
    return node(out, (x, _mT))


def transpose(x, axes):
    xv = value(x)
    out = np.transpose(xv, axes)
    if not _tracked(x):
        return out
    inverse = np.argsort(axes)
    return node(out, (x, lambda g: np.transpose(g, inverse)))


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    if not _tracked(x):
        return out
    return node(out, (x, lambda g: g.reshape(xv.shape)))


def getitem(x, idx):
    xv = value(x)
    out = xv[idx]
    if not _tracked(x):
        return out

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return full

    return node(out, (x, vjp))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy name
    xv = value(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not _tracked(x):
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return node(out, (x, vjp))


def sqrt(x):
    xv = value(x)
    out = np.sqrt(xv)
    if not _tracked(x):
        return out
    return node(out, (x, lambda g: g * 0.5 / out))


def absolute(x):
    xv = value(x)
    out = np.abs(xv)
    if not _tracked(x):
        return out
    return node(out, (x, lambda g: g * np.sign(xv)))


def relu(x):
    xv = value(x)
    out = np.maximum(xv, 0.0)
    if not _tracked(x):
        return out
    return node(out, (x, lambda g: g * (xv > 0)))


def sigmoid(x):
    xv = value(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    if not _tracked(x):
        return out
    return node(out, (x, lambda g: g * out * (1.0 - out)))


def where(cond, x, y):
    """Select elementwise; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond)
    xv, yv = value(x), value(y)
    out = np.where(cond, xv, yv)
    if not _tracked(x, y):
        return out
    return node(
        out,
        (x, lambda g: _unbroadcast(np.where(cond, g, 0.0), xv.shape)),
        (y, lambda g: _unbroadcast(np.where(cond, 0.0, g), yv.shape)),
    )


def solve(a, b):
    """Batched ``a^{-1} b`` with ``b`` a stack of matrices."""
    av, bv = value(a), value(b)
    out = np.linalg.solve(av, bv)
    if not _tracked(a, b):
        return out
    cache = {}

    def gb(g):
        if "gb" not in cache:
            cache["gb"] = np.linalg.solve(_mT(av), g)
        return cache["gb"]

    return node(
        out,
        (a, lambda g: _unbroadcast(-gb(g) @ _mT(out), av.shape)),
        (b, lambda g: _unbroadcast(gb(g), bv.shape)),
    )


def inv(a):
    av = value(a)
    out = np.linalg.inv(av)
    if not _tracked(a):
        return out
    return node(out, (a, lambda g: -_mT(out) @ g @ _mT(out)))


def logdet(a):
    """log det of a stack of matrices with positive determinant."""
    av = value(a)
    sign, out = np.linalg.slogdet(av)
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("logdet of matrix with non-positive determinant")
    if not _tracked(a):
        return out
    return node(out, (a, lambda g: g[..., None, None] * _mT(np.linalg.inv(av))))

