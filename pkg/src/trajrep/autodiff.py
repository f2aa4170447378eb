"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: ``Tensor`` wraps an ndarray and records, for each
op, the local gradient functions of its Tensor inputs. ``backward()`` walks
the graph in reverse topological order and accumulates gradients into leaves.

Every public op also accepts plain ndarrays/scalars and then evaluates in
pure numpy, so the same formula code can run with or without gradients.
Gradients are only propagated to Tensor inputs.

The working dtype defaults to float64. Training loops may switch to float32
via ``use_dtype`` for throughput; operands are cast to the active dtype on
entry. Correctness checks (finite differences) stay in double precision,
and analysis code outside a ``use_dtype`` block always runs in float64.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "is_tensor", "as_array",
    "default_dtype", "set_default_dtype", "use_dtype",
    "add", "sub", "mul", "div", "neg", "matmul", "power",
    "exp", "log", "sqrt", "safe_sqrt", "tanh", "sigmoid", "softplus", "relu",
    "absolute", "atan2", "clip", "wrap_angle", "minimum", "maximum",
    "tsum", "tmean", "logsumexp", "cross_entropy_with_logits",
    "reshape", "transpose", "getitem", "concatenate", "stack",
    "l2_normalize", "check_finite",
]


class NumericError(RuntimeError):
    """A non-finite value appeared inside a differentiable computation."""


_DEFAULT_DTYPE = np.float64


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    """Set the working dtype for new Tensors and op operands."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the working dtype (e.g. float32 for training)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Node in the computation graph.

    ``_parents`` is a list of ``(parent_tensor, local_grad_fn)`` pairs where
    ``local_grad_fn`` maps the output gradient to the parent's gradient
    contribution (already reduced to the parent's shape).
    """

    __slots__ = ("data", "grad", "_parents")

    def __init__(self, data, parents=()):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self._parents = parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype) if self.grad is None \
            else self.grad + grad
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, fn in node._parents:
                pg = fn(g)
                parent.grad = pg if parent.grad is None else parent.grad + pg

    # Operator sugar; all routed through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def as_array(x) -> np.ndarray:
    """Underlying ndarray of a Tensor, or the input coerced to float64."""
    if is_tensor(x):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _val(x):
    return x.data if is_tensor(x) else np.asarray(x, dtype=_DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(out, pairs):
    """Build a Tensor keeping only Tensor parents, else return the ndarray."""
    parents = [(p, fn) for p, fn in pairs if is_tensor(p)]
    if parents:
        return Tensor(out, parents)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(g, bv.shape))])


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(-g, bv.shape))])


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    return _node(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                       (b, lambda g: _unbroadcast(g * av, bv.shape))])


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _node(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                       (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))])


def neg(a):
    return _node(-_val(a), [(a, lambda g: -g)])


def power(a, p):
    av = _val(a)
    p = float(p)
    out = av ** p
    return _node(out, [(a, lambda g: g * p * av ** (p - 1.0))])


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv

    def ga(g):
        r = g @ np.swapaxes(bv, -1, -2)
        return _unbroadcast(r, av.shape)

    def gb(g):
        r = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(r, bv.shape)

    return _node(out, [(a, ga), (b, gb)])


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a):
    out = np.exp(_val(a))
    return _node(out, [(a, lambda g: g * out)])


def log(a):
    av = _val(a)
    return _node(np.log(av), [(a, lambda g: g / av)])


def sqrt(a):
    out = np.sqrt(_val(a))
    return _node(out, [(a, lambda g: g * 0.5 / out)])


def safe_sqrt(a):
    """sqrt with zero gradient at exactly 0 (norm-style kink guard)."""
    av = _val(a)
    out = np.sqrt(av)
    denom = np.where(out == 0.0, 1.0, out)
    mask = (out != 0.0).astype(out.dtype)
    return _node(out, [(a, lambda g: g * 0.5 * mask / denom)])


def minimum(a, b):
    av, bv = _val(a), _val(b)
    take_a = (av <= bv).astype(av.dtype)
    out = np.minimum(av, bv)
    return _node(out, [(a, lambda g: _unbroadcast(g * take_a, av.shape)),
                       (b, lambda g: _unbroadcast(g * (1.0 - take_a), bv.shape))])


def maximum(a, b):
    av, bv = _val(a), _val(b)
    take_a = (av >= bv).astype(av.dtype)
    out = np.maximum(av, bv)
    return _node(out, [(a, lambda g: _unbroadcast(g * take_a, av.shape)),
                       (b, lambda g: _unbroadcast(g * (1.0 - take_a), bv.shape))])


def tanh(a):
    out = np.tanh(_val(a))
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a):
    av = _val(a)
    out = 1.0 / (1.0 + np.exp(-av))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    av = _val(a)
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    sig = 1.0 / (1.0 + np.exp(-av))
    return _node(out, [(a, lambda g: g * sig)])


def relu(a):
    av = _val(a)
    mask = (av > 0.0).astype(av.dtype)
    return _node(av * mask, [(a, lambda g: g * mask)])


def absolute(a):
    av = _val(a)
    s = np.sign(av)
    return _node(np.abs(av), [(a, lambda g: g * s)])


def atan2(y, x):
    yv, xv = _val(y), _val(x)
    out = np.arctan2(yv, xv)
    denom = xv * xv + yv * yv
    safe = np.where(denom == 0.0, 1.0, denom)
    return _node(out, [(y, lambda g: _unbroadcast(g * xv / safe, yv.shape)),
                       (x, lambda g: _unbroadcast(-g * yv / safe, xv.shape))])


def clip(a, lo, hi):
    av = _val(a)
    out = np.clip(av, lo, hi)
    mask = ((av >= lo) & (av <= hi)).astype(av.dtype)
    return _node(out, [(a, lambda g: g * mask)])


def wrap_angle(a):
    """Wrap to (-pi, pi]; the wrap is a shift so the derivative is 1 a.e."""
    av = _val(a)
    out = av - 2.0 * np.pi * np.round(av / (2.0 * np.pi))
    return _node(out, [(a, lambda g: g)])


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a, axis=None, keepdims=False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def ga(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy() if np.ndim(g) == 0 \
                else np.full(av.shape, g)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return _node(out, [(a, ga)])


def tmean(a, axis=None, keepdims=False):
    av = _val(a)
    if axis is None:
        n = av.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([av.shape[i] for i in axes]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return div(s, float(n)) if is_tensor(s) else s / float(n)


def logsumexp(a, axis=-1, keepdims=False):
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s))
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def ga(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * soft

    return _node(out, [(a, ga)])


def cross_entropy_with_logits(logits, labels):
    """Mean softmax cross-entropy; ``labels`` are integer class indices."""
    lv = _val(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = lv.shape[0]
    m = lv.max(axis=1, keepdims=True)
    e = np.exp(lv - m)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(n), labels] + 1e-300)
    out = nll.mean()

    def ga(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return g * grad / n

    return _node(out, [(logits, ga)])


def reshape(a, shape):
    av = _val(a)
    return _node(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def transpose(a, axes=None):
    av = _val(a)
    out = np.transpose(av, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, [(a, lambda g: np.transpose(g, inv))])


def getitem(a, idx):
    av = _val(a)
    out = av[idx]

    def ga(g):
        grad = np.zeros_like(av)
        np.add.at(grad, idx, g)
        return grad

    return _node(out, [(a, ga)])


def concatenate(parts, axis=0):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, [(p, make_fn(i)) for i, p in enumerate(parts)])


def stack(parts, axis=0):
    vals = [_val(p) for p in parts]
    out = np.stack(vals, axis=axis)

    def make_fn(i):
        return lambda g: np.take(g, i, axis=axis)

    return _node(out, [(p, make_fn(i)) for i, p in enumerate(parts)])


def l2_normalize(a, axis=-1, eps=1e-12):
    """Rows scaled to unit L2 norm, differentiable through the norm."""
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    norm = sqrt(add(sq, eps))
    return div(a, norm)


def check_finite(x, where: str):
    """Raise NumericError if ``x`` holds any non-finite value."""
    v = _val(x)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite value in {where}")
    return x
