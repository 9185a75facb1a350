"""Minimal tape-free reverse-mode autodiff over numpy arrays.

Only the operations the model needs are provided. Each op returns a new
:class:`Tensor` that remembers its parents and a closure propagating the
output gradient back to them; :func:`backward` runs the closures in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

from . import special


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(value, parents, fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents, fn)


def backward(out: Tensor):
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    order, seen = [], set()
    stack = [(out, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), fn)


def neg(a):
    return _make(-a.value, (a,), lambda g: _accumulate(a, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), fn)


def reciprocal(a):
    v = 1.0 / a.value
    return _make(v, (a,), lambda g: _accumulate(a, -g * v * v))


def relu(a):
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: _accumulate(a, g * mask))


def softplus(a):
    x = a.value
    v = np.logaddexp(0.0, x)
    return _make(v, (a,), lambda g: _accumulate(a, g * _sigmoid(x)))


def clip_max(a, upper):
    mask = a.value <= upper
    return _make(np.minimum(a.value, upper), (a,), lambda g: _accumulate(a, g * mask))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def log_sigmoid(a):
    x = a.value
    v = -np.logaddexp(0.0, -x)
    return _make(v, (a,), lambda g: _accumulate(a, g * _sigmoid(-x)))


def lgamma(a):
    return _make(special.lgamma(a.value), (a,),
                 lambda g: _accumulate(a, g * special.digamma(a.value)))


def digamma(a):
    return _make(special.digamma(a.value), (a,),
                 lambda g: _accumulate(a, g * special.trigamma(a.value)))


# ---------------------------------------------------------------------------
# shape / reduction

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape))

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a):
    n = a.value.size
    return _make(a.value.mean(), (a,), lambda g: _accumulate(a, np.full(a.shape, g / n)))


def getitem(a, index):
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.value[index], (a,), fn)


def take(a, idx):
    """Rows ``a[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(a.value[idx], (a,), fn)


def concat(ts, axis=-1):
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _make(np.concatenate([t.value for t in ts], axis=axis), ts, fn)


def stack(ts, axis=0):
    ts = [as_tensor(t) for t in ts]

    def fn(g):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.value for t in ts], axis=axis), ts, fn)


def softmax(a, axis=0):
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    # sorted accumulation keeps the result independent of input order
    s = e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)

    def fn(g):
        _accumulate(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), fn)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            ga = a.value.reshape(-1, a.shape[-1])
            _accumulate(b, ga.T @ g.reshape(-1, g.shape[-1]))

    return _make(a.value @ b.value, (a, b), fn)


def grouped_linear(x, weight, bias, groups):
    """Row ``i`` of the result is ``x[i] @ weight[groups[i]] + bias[groups[i]]``.

    ``weight`` has shape (G, d_in, d_out) and ``bias`` (G, d_out); rows are
    processed group by group, so memory stays proportional to ``x``.
    """
    groups = np.asarray(groups, dtype=np.int64)
    xv, wv, bv = x.value, weight.value, bias.value
    out = np.empty((xv.shape[0], wv.shape[2]))
    members = [(gid, np.flatnonzero(groups == gid)) for gid in np.unique(groups)]
    for gid, rows in members:
        out[rows] = xv[rows] @ wv[gid] + bv[gid]

    def fn(g):
        gx = np.zeros_like(xv) if x.requires_grad else None
        gw = np.zeros_like(wv) if weight.requires_grad else None
        gb = np.zeros_like(bv) if bias.requires_grad else None
        for gid, rows in members:
            if gx is not None:
                gx[rows] = g[rows] @ wv[gid].T
            if gw is not None:
                gw[gid] += xv[rows].T @ g[rows]
            if gb is not None:
                gb[gid] += g[rows].sum(axis=0)
        for t, gr in ((x, gx), (weight, gw), (bias, gb)):
            if gr is not None:
                _accumulate(t, gr)

    return _make(out, (x, weight, bias), fn)
