"""Tape-free reverse-mode differentiation over float64 numpy arrays.

A :class:`Var` records its parents and a closure that maps the output
gradient to parent gradients. ``backward`` walks the graph in reverse
topological order. Only the primitives defined here are supported; handing a
``Var`` to a numpy ufunc or mixing it with an unsupported type raises
``TypeError`` when the expression is built.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_NEG_LARGE = -1e30


def _as_array(value) -> np.ndarray:
    if isinstance(value, np.ndarray):
        if value.dtype.kind not in "fiub":
            raise TypeError(f"unsupported array dtype {value.dtype}")
        return value.astype(np.float64, copy=False)
    if isinstance(value, (bool, int, float, np.floating, np.integer)):
        return np.asarray(value, dtype=np.float64)
    raise TypeError(f"unsupported operand of type {type(value).__name__}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in a differentiable expression graph."""

    __slots__ = ("value", "parents", "backward_fn", "grad")
    # keeps numpy from broadcasting its ufuncs over a Var
    __array_ufunc__ = None

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn=None):
        self.value = _as_array(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# primitives -----------------------------------------------------------------


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = a.value + b.value

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(out, (a, b), back)


def neg(a) -> Var:
    a = _lift(a)
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return Var(av * bv, (a, b), back)


def reciprocal(a) -> Var:
    a = _lift(a)
    out = 1.0 / a.value
    return Var(out, (a,), lambda g: (-g * out * out,))


def power(a, exponent: float) -> Var:
    a = _lift(a)
    if isinstance(exponent, Var) or not np.isscalar(exponent):
        raise TypeError("power supports a constant scalar exponent only")
    p = float(exponent)
    av = a.value
    return Var(av**p, (a,), lambda g: (g * p * av ** (p - 1.0),))


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    av, bv = a.value, b.value
    # a stack against one weight matrix: fold the batch axes for the weight gradient
    flat = b.ndim == 2 and a.ndim > 2

    def back(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            return g @ bv.T, av.reshape(-1, av.shape[-1]).T @ g2
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return Var(av @ bv, (a, b), back)


def exp(a) -> Var:
    a = _lift(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = _lift(a)
    av = a.value
    return Var(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Var:
    a = _lift(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a) -> Var:
    a = _lift(a)
    av = a.value
    sig = expit(av)
    out = av * sig
    return Var(out, (a,), lambda g: (g * (sig + out * (1.0 - sig)),))


def reduce_sum(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(out, (a,), back)


def reduce_mean(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Var:
    a = _lift(a)
    old = a.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i: int, j: int) -> Var:
    a = _lift(a)
    return Var(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, index) -> Var:
    a = _lift(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Var(a.value[index], (a,), back)


def take_rows(table, ids: np.ndarray) -> Var:
    """Embedding lookup: ``table[ids]`` for an integer index array."""
    table = _lift(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("row indices must be integers")
    shape = table.shape

    def back(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, shape[0]))
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, shape[-1]),)

    return Var(table.value[ids], (table,), back)


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [_lift(p) for p in parts]
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Var(out, parts, back)


def log_softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Var:
    """Log-softmax along ``axis``; ``mask`` (broadcastable, True = keep)."""
    a = _lift(a)
    z = a.value
    if mask is not None:
        z = np.where(mask, z, _NEG_LARGE)
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        ga = g - probs * g.sum(axis=axis, keepdims=True)
        if mask is not None:
            ga = np.where(mask, ga, 0.0)
        return (ga,)

    return Var(out, (a,), back)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Var:
    a = _lift(a)
    z = a.value
    if mask is not None:
        z = np.where(mask, z, _NEG_LARGE)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Var(out, (a,), back)


# traversal ------------------------------------------------------------------


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if parent.grad is None:
                # backward closures never write into their outputs, so no copy is needed
                parent.grad = np.asarray(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g


# dual-mode helpers: same forward code runs on plain arrays or on Vars --------


def is_var(x) -> bool:
    return isinstance(x, Var)


def d_tanh(x):
    return tanh(x) if isinstance(x, Var) else np.tanh(x)


def d_silu(x):
    if isinstance(x, Var):
        return silu(x)
    out = expit(x)
    out *= x
    return out


def d_concat(parts: Sequence, axis: int = -1):
    if any(isinstance(p, Var) for p in parts):
        return concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def d_softmax(x, axis: int = -1, mask=None):
    if isinstance(x, Var):
        return softmax(x, axis=axis, mask=mask)
    z = x if mask is None else np.where(mask, x, _NEG_LARGE)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def d_log_softmax(x, axis: int = -1, mask=None):
    if isinstance(x, Var):
        return log_softmax(x, axis=axis, mask=mask)
    z = x if mask is None else np.where(mask, x, _NEG_LARGE)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def d_take_rows(table, ids):
    if isinstance(table, Var):
        return take_rows(table, ids)
    return table[np.asarray(ids)]


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


GradFn = Callable[..., Var]
