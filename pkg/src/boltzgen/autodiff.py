"""A small tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure mapping the
upstream gradient to parent gradients. Only first-order gradients are
supported, which is all the networks need (parameter gradients of the loss
and input gradients for the score).
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def leaf(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def _make(value, parents, fn):
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, fn, True)
    return Tensor(value)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` where ``b`` is a 2-D weight matrix."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def fn(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(av @ bv, (a, b), fn)


def linear(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    shape = a.value.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def square(a) -> Tensor:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def sin(a) -> Tensor:
    av = a.value
    return _make(np.sin(av), (a,), lambda g: (np.cos(av) * g,))


def cos(a) -> Tensor:
    av = a.value
    return _make(np.cos(av), (a,), lambda g: (-np.sin(av) * g,))


def gelu(a) -> Tensor:
    """Exact GELU x * Phi(x)."""
    av = a.value
    cdf = 0.5 * (1.0 + erf(av / _SQRT2))

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
        return ((cdf + av * pdf) * g,)

    return _make(av * cdf, (a,), fn)


def silu(a) -> Tensor:
    av = a.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))

    def fn(g):
        return ((sig * (1.0 + av * (1.0 - sig))) * g,)

    return _make(av * sig, (a,), fn)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), fn)


def take(a, idx, axis=1) -> Tensor:
    """Gather ``a`` along ``axis`` with integer indices (duplicates allowed)."""
    av = a.value
    idx = np.asarray(idx)

    def fn(g):
        out = np.zeros_like(av)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(av, idx, axis=axis), (a,), fn)


def broadcast_to(a, shape) -> Tensor:
    old = a.value.shape
    return _make(np.broadcast_to(a.value, shape), (a,), lambda g: (_unbroadcast(g, old),))


# --------------------------------------------------------------------------
# backward pass


def grad(root: Tensor, wrt, seed=None):
    """Gradients of ``sum(seed * root)`` with respect to each tensor in ``wrt``."""
    if seed is None:
        seed = np.ones_like(root.value)
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
        if g is None or node.backward_fn is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]
