"""Float64 arrays carrying an optional forward-mode tangent.

Every forward and backward rule in :mod:`moe_lab.autodiff` is written in terms
of :class:`Dual` arithmetic.  When the parameters are seeded with a tangent
``v``, the backward pass therefore also carries the directional derivative of
the gradient, which is exactly the Hessian-vector product ``H @ v``.  When no
tangent is present (``dot is None``) the extra work is skipped.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr as _ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class Dual:
    __slots__ = ("val", "dot")

    def __init__(self, val, dot=None):
        self.val = np.asarray(val, dtype=np.float64)
        self.dot = None if dot is None else np.asarray(dot, dtype=np.float64)

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def T(self):
        return Dual(self.val.T, None if self.dot is None else self.dot.T)

    def __repr__(self):
        return f"Dual(val={self.val!r}, dot={self.dot!r})"

    def __add__(self, other):
        other = lift(other)
        return Dual(self.val + other.val, _tadd(self.dot, other.dot))

    __radd__ = __add__

    def __sub__(self, other):
        other = lift(other)
        dot = _tadd(self.dot, None if other.dot is None else -other.dot)
        return Dual(self.val - other.val, dot)

    def __rsub__(self, other):
        return lift(other) - self

    def __neg__(self):
        return Dual(-self.val, None if self.dot is None else -self.dot)

    def __mul__(self, other):
        other = lift(other)
        dot = None
        if self.dot is not None:
            dot = self.dot * other.val
        if other.dot is not None:
            dot = _tadd(dot, self.val * other.dot)
        return Dual(self.val * other.val, dot)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = lift(other)
        out = self.val / other.val
        dot = self.dot
        if other.dot is not None:
            dot = _tadd(dot, -out * other.dot)
        if dot is not None:
            dot = dot / other.val
        return Dual(out, dot)

    def __rtruediv__(self, other):
        return lift(other) / self

    def __matmul__(self, other):
        other = lift(other)
        dot = None
        if self.dot is not None:
            dot = self.dot @ other.val
        if other.dot is not None:
            dot = _tadd(dot, self.val @ other.dot)
        return Dual(self.val @ other.val, dot)

    def __getitem__(self, index):
        return Dual(self.val[index], None if self.dot is None else self.dot[index])


def lift(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(x)


def zeros(shape, tangent=False) -> Dual:
    return Dual(np.zeros(shape), np.zeros(shape) if tangent else None)


def _map(a: Dual, val, deriv):
    """Elementwise function with value ``val`` and derivative ``deriv`` at a."""
    return Dual(val, None if a.dot is None else deriv * a.dot)


def exp(a: Dual) -> Dual:
    e = np.exp(a.val)
    return _map(a, e, e)


def log(a: Dual) -> Dual:
    return _map(a, np.log(a.val), 1.0 / a.val)


def sqrt(a: Dual) -> Dual:
    s = np.sqrt(a.val)
    return _map(a, s, 0.5 / s)


def sigmoid(a: Dual) -> Dual:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.val))
    return _map(a, s, s * (1.0 - s))


def softplus(a: Dual) -> Dual:
    return _map(a, np.logaddexp(0.0, a.val), 0.5 * (1.0 + np.tanh(0.5 * a.val)))


def npdf(a: Dual) -> Dual:
    p = _INV_SQRT_2PI * np.exp(-0.5 * a.val * a.val)
    return _map(a, p, -a.val * p)


def ndtr(a: Dual) -> Dual:
    return _map(a, _ndtr(a.val), _INV_SQRT_2PI * np.exp(-0.5 * a.val * a.val))


def sum(a: Dual, axis=None, keepdims=False) -> Dual:  # noqa: A001
    dot = None if a.dot is None else a.dot.sum(axis=axis, keepdims=keepdims)
    return Dual(a.val.sum(axis=axis, keepdims=keepdims), dot)


def reshape(a: Dual, shape) -> Dual:
    return Dual(a.val.reshape(shape), None if a.dot is None else a.dot.reshape(shape))


def broadcast_to(a: Dual, shape) -> Dual:
    dot = None if a.dot is None else np.broadcast_to(a.dot, shape)
    return Dual(np.broadcast_to(a.val, shape), dot)


def unbroadcast(a: Dual, shape) -> Dual:
    """Sum ``a`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead:
        a = sum(a, axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and a.shape[i] != 1)
    if axes:
        a = sum(a, axis=axes, keepdims=True)
    return a


def scatter_add(shape, index, a: Dual) -> Dual:
    """Zeros of ``shape`` with ``a`` added at ``index`` (duplicates accumulate)."""
    val = np.zeros(shape)
    np.add.at(val, index, a.val)
    dot = None
    if a.dot is not None:
        dot = np.zeros(shape)
        np.add.at(dot, index, a.dot)
    return Dual(val, dot)


def concat(parts, axis=0) -> Dual:
    val = np.concatenate([p.val for p in parts], axis=axis)
    if all(p.dot is None for p in parts):
        return Dual(val)
    dots = [np.zeros_like(p.val) if p.dot is None else p.dot for p in parts]
    return Dual(val, np.concatenate(dots, axis=axis))
