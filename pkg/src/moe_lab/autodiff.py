"""Reverse-mode differentiation over float64 numpy arrays.

Each op records a node holding its inputs and a backward rule.  Values and
gradients are :class:`~moe_lab.dual.Dual` arrays, so seeding a leaf with a
tangent turns the ordinary backward pass into a forward-over-reverse
Hessian-vector product.

Conventions: ``relu'(0) = 0``; the second derivative of relu is zero; index
selections (top-k, labels) are constants of the graph.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass

import numpy as np

from . import dual as D
from .dual import Dual
from .errors import NumericError, UsageError

_local = threading.local()
_node_counter = itertools.count()
_nodes_created = 0


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def node_count() -> int:
    """Number of graph nodes recorded by this process so far."""
    return _nodes_created


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_shapes(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise UsageError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 array; ``tangent`` is an optional same-shape
    direction used by :func:`hvp`.  After :func:`backward`, ``grad`` holds the
    gradient and ``grad_tangent`` its directional derivative.
    """

    __slots__ = ("value", "requires_grad", "_grad", "_owned", "_parents", "_backward", "op", "id")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad=False, tangent=None):
        data = np.array(data, dtype=np.float64)
        if tangent is not None:
            tangent = np.array(tangent, dtype=np.float64)
            if tangent.shape != data.shape:
                raise UsageError(f"tangent shape {tangent.shape} != data shape {data.shape}")
        self.value = Dual(data, tangent)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._owned = False
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.id = next(_node_counter)

    @classmethod
    def _make(cls, value: Dual, parents, backward, op):
        if not np.isfinite(value.val).all():
            bad = [p.op for p in parents if not np.isfinite(p.value.val).all()]
            what = "non-finite input" if bad else "non-finite output"
            raise NumericError(f"{op}: {what}")
        out = cls.__new__(cls)
        out.value = value
        out._grad = None
        out._owned = False
        out.op = op
        out.id = next(_node_counter)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            global _nodes_created
            _nodes_created += 1
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- accessors --------------------------------------------------------
    @property
    def data(self) -> np.ndarray:
        return self.value.val

    @property
    def tangent(self):
        return self.value.dot

    @property
    def shape(self):
        return self.value.val.shape

    @property
    def size(self):
        return self.value.val.size

    @property
    def ndim(self):
        return self.value.val.ndim

    @property
    def grad(self):
        return None if self._grad is None else self._grad.val

    @property
    def grad_tangent(self):
        return None if self._grad is None else self._grad.dot

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.value.val)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: Dual, index=None):
        if not self.requires_grad:
            return
        if index is None:
            if self._grad is None:
                self._grad, self._owned = g, False
            else:
                self._grad, self._owned = self._grad + g, True
            return
        if self._grad is None:
            self._grad = D.zeros(self.shape, tangent=g.dot is not None)
        elif not self._owned:
            old = self._grad
            self._grad = Dual(old.val.copy(), None if old.dot is None else old.dot.copy())
        self._owned = True
        self._grad.val[index] += g.val
        if g.dot is not None:
            if self._grad.dot is None:
                self._grad.dot = np.zeros(self.shape)
            self._grad.dot[index] += g.dot

    def backward(self):
        backward(self)

    # -- operator sugar ---------------------------------------------------
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

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# -- graph traversal --------------------------------------------------------

@dataclass
class Graph:
    """Recorded nodes reachable from ``output``, inputs before consumers."""

    nodes: list
    output: Tensor


def build_graph(output: Tensor) -> Graph:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.id not in seen:
                stack.append((p, False))
    return Graph(order, output)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    graph = graph or build_graph(loss)
    loss._accumulate(Dual(np.ones(loss.shape)))
    for node in reversed(graph.nodes):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
            if node is not loss:
                node._grad = None  # intermediate buffers are not needed afterwards


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes("add", a, b)

    def bw(g):
        a._accumulate(D.unbroadcast(g, a.shape))
        b._accumulate(D.unbroadcast(g, b.shape))

    return Tensor._make(a.value + b.value, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes("sub", a, b)

    def bw(g):
        a._accumulate(D.unbroadcast(g, a.shape))
        b._accumulate(D.unbroadcast(-g, b.shape))

    return Tensor._make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes("mul", a, b)
    av, bv = a.value, b.value

    def bw(g):
        a._accumulate(D.unbroadcast(g * bv, a.shape))
        b._accumulate(D.unbroadcast(g * av, b.shape))

    return Tensor._make(av * bv, (a, b), bw, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        gb = g / bv
        a._accumulate(D.unbroadcast(gb, a.shape))
        b._accumulate(D.unbroadcast(-gb * out, b.shape))

    return Tensor._make(out, (a, b), bw, "div")


def _unary(a, fn, deriv, op):
    a = _as_tensor(a)
    av = a.value

    def bw(g):
        a._accumulate(g * deriv(av))

    return Tensor._make(fn(av), (a,), bw, op)


def exp(a):
    a = _as_tensor(a)
    out = D.exp(a.value)

    def bw(g):
        a._accumulate(g * out)

    return Tensor._make(out, (a,), bw, "exp")


def log(a):
    return _unary(a, D.log, lambda v: 1.0 / v, "log")


def sqrt(a):
    a = _as_tensor(a)
    out = D.sqrt(a.value)

    def bw(g):
        a._accumulate(g * 0.5 / out)

    return Tensor._make(out, (a,), bw, "sqrt")


def softplus(a):
    return _unary(a, D.softplus, D.sigmoid, "softplus")


def ndtr(a):
    """Standard normal CDF."""
    return _unary(a, D.ndtr, D.npdf, "ndtr")


def relu(a):
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def bw(g):
        a._accumulate(g * mask)

    return Tensor._make(a.value * mask, (a,), bw, "relu")


def where(cond, a, b):
    """Select ``a`` where the constant mask ``cond`` is true, else ``b``."""
    m = np.asarray(cond, dtype=np.float64)
    return add(mul(a, m), mul(b, 1.0 - m))


# -- linear algebra / shape -------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise UsageError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ bv.T)
        if b.requires_grad:
            b._accumulate(av.T @ g)

    return Tensor._make(av @ bv, (a, b), bw, "matmul")


def transpose(a):
    a = _as_tensor(a)

    def bw(g):
        a._accumulate(g.T)

    return Tensor._make(a.value.T, (a,), bw, "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = D.reshape(a.value, shape)
    except ValueError:
        raise UsageError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def bw(g):
        a._accumulate(D.reshape(g, a.shape))

    return Tensor._make(out, (a,), bw, "reshape")


def take(a, index):
    """``a[index]``; repeated fancy indices accumulate in the backward pass."""
    a = _as_tensor(a)
    try:
        out = a.value[index]
    except IndexError as exc:
        raise UsageError(f"take: {exc}") from None

    def bw(g):
        a._accumulate(D.scatter_add(a.shape, index, g))

    return Tensor._make(out, (a,), bw, "take")


def view(flat, start: int, shape):
    """Contiguous slice of a 1-D tensor reshaped to ``shape``.

    The backward pass adds into the parent's gradient in place, so slicing a
    large flat parameter vector many times stays linear in its size.
    """
    flat = _as_tensor(flat)
    n = int(np.prod(shape, dtype=np.int64))
    sl = slice(start, start + n)
    out = D.reshape(flat.value[sl], shape)

    def bw(g):
        flat._accumulate(D.reshape(g, (n,)), sl)

    return Tensor._make(out, (flat,), bw, "view")


def scatter(shape, index, a):
    """Zeros of ``shape`` with ``a`` added at ``index``."""
    a = _as_tensor(a)

    def bw(g):
        a._accumulate(g[index])

    return Tensor._make(D.scatter_add(shape, index, a.value), (a,), bw, "scatter")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = D.concat([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise UsageError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._make(out, tensors, bw, "concat")


# -- reductions -------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = D.reshape(g, np.expand_dims(np.empty(g.shape), axis).shape)
        a._accumulate(D.broadcast_to(g, a.shape))

    return Tensor._make(D.sum(a.value, axis, keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


# -- softmax family ---------------------------------------------------------

def _softmax_dual(z: Dual) -> Dual:
    e = D.exp(z - z.val.max(axis=-1, keepdims=True))
    return e / D.sum(e, axis=-1, keepdims=True)


def _logsumexp_dual(z: Dual) -> Dual:
    m = z.val.max(axis=-1, keepdims=True)
    return D.log(D.sum(D.exp(z - m), axis=-1, keepdims=True)) + m


def softmax(a):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = _as_tensor(a)
    s = _softmax_dual(a.value)

    def bw(g):
        a._accumulate(s * (g - D.sum(g * s, axis=-1, keepdims=True)))

    return Tensor._make(s, (a,), bw, "softmax")


def log_softmax(a):
    a = _as_tensor(a)
    z = a.value
    out = z - _logsumexp_dual(z)

    def bw(g):
        a._accumulate(g - _softmax_dual(z) * D.sum(g, axis=-1, keepdims=True))

    return Tensor._make(out, (a,), bw, "log_softmax")


def cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` (B x C) against integer ``labels``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise UsageError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise UsageError("cross_entropy: label out of range")
    z = logits.value
    rows = np.arange(labels.size)
    per = D.reshape(_logsumexp_dual(z), (labels.size,)) - z[rows, labels]
    out = D.sum(per) / labels.size
    onehot = np.zeros(logits.shape)
    onehot[rows, labels] = 1.0

    def bw(g):
        logits._accumulate((_softmax_dual(z) - onehot) * (g / labels.size))

    return Tensor._make(out, (logits,), bw, "cross_entropy")


def randn(rng, shape):
    """Constant tensor of standard normal draws from a :class:`~moe_lab.rng.Rng`."""
    return Tensor(rng.normal(shape))


# -- functional helpers -----------------------------------------------------

def _flat_check(params, v=None):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1:
        raise UsageError(f"expected a flat parameter vector, got shape {params.shape}")
    if v is not None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != params.shape:
            raise UsageError(f"direction shape {v.shape} != params shape {params.shape}")
    return params, v


def value_and_grad(loss_fn, params):
    """Return ``(loss, gradient)`` of ``loss_fn(theta: Tensor) -> scalar`` at ``params``."""
    params, _ = _flat_check(params)
    theta = Tensor(params, requires_grad=True)
    loss = loss_fn(theta)
    backward(loss)
    g = theta.grad if theta.grad is not None else np.zeros_like(params)
    return loss.item(), g


def grad_and_hvp(loss_fn, params, v):
    """Gradient and Hessian-vector product from one forward-over-reverse pass."""
    params, v = _flat_check(params, v)
    theta = Tensor(params, requires_grad=True, tangent=v)
    loss = loss_fn(theta)
    backward(loss)
    g = theta.grad if theta.grad is not None else np.zeros_like(params)
    hv = theta.grad_tangent if theta.grad_tangent is not None else np.zeros_like(params)
    if not np.isfinite(hv).all():
        raise NumericError("hvp: non-finite result")
    return g, hv


def hvp(loss_fn, params, v):
    """``H @ v`` where ``H`` is the Hessian of ``loss_fn`` at ``params``."""
    return grad_and_hvp(loss_fn, params, v)[1]
