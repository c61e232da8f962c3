"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation records
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the tape in reverse topological order, returns a
:class:`GradMap` for the leaves that asked for gradients, and frees the tape.

Only the broadcasting the toy model needs is supported: trailing-aligned
numpy broadcasting for ``add``/``mul`` and batched ``matmul`` against 2-D
operands.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable taping; ops return constants."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "_prev", "_backward", "op", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self.op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class GradMap(dict):
    """Leaf tensor -> gradient array. Leaves off the loss path read as zeros."""

    def __missing__(self, key):
        return np.zeros_like(key.data)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._prev = tuple(parents)
        out._backward = backward
    else:
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.shape)))
        return out

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: [(a, -g)], "neg")


def clip(x, lo, hi):
    """Clamp into [lo, hi]; gradient passes where lo <= x <= hi (inclusive)."""
    data = np.clip(x.data, lo, hi)

    def backward(g):
        inside = (x.data >= lo) & (x.data <= hi)
        return [(x, g * inside)]

    return _make(data, (x,), backward, "clip")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return [(x, g * d)]

    return _make(data.astype(xd.dtype, copy=False), (x,), backward, "gelu")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}") from None
    data = np.matmul(a.data, b.data)

    def backward(g):
        out = []
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                # constant-left product (e.g. DCT): reduce over the batch axes
                ga = np.einsum("...mn,...kn->mk", g, np.broadcast_to(b.data, g.shape[:-2] + b.shape[-2:]))
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            out.append((a, ga))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            elif b.ndim == 2 and g.ndim > 2:
                gb = np.einsum("...km,...kn->mn", np.broadcast_to(a.data, g.shape[:-2] + a.shape[-2:]), g)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            out.append((b, gb))
        return out

    return _make(data, (a, b), backward, "matmul")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return [(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))]

    return _make(y, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return [(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))]

    return _make(y, (x,), backward, "log_softmax")


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: shape mismatch {x.shape} vs {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    data = xhat * gamma.data + beta.data

    def backward(g):
        out = []
        if x.requires_grad:
            gx = g * gamma.data
            gx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            out.append((x, gx))
        if gamma.requires_grad:
            out.append((gamma, (g * xhat).reshape(-1, d).sum(axis=0)))
        if beta.requires_grad:
            out.append((beta, g.reshape(-1, d).sum(axis=0)))
        return out

    return _make(data.astype(x.data.dtype, copy=False), (x, gamma, beta), backward, "layernorm")


# ----------------------------------------------------------------------------
# indexing and shape


def embed_lookup(table, ids):
    """Gather rows of ``table`` along axis 0; ``ids`` is an integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: index out of range for table {table.shape}")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return [(table, gt)]

    return _make(data, (table,), backward, "embed_lookup")


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                out.append((t, g[tuple(idx)]))
        return out

    return _make(data, tensors, backward, "concat")


def slice_(x, key):
    """Basic (non-fancy) indexing."""
    data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return [(x, gx)]

    return _make(data, (x,), backward, "slice")


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shape mismatch {x.shape} vs {tuple(shape)}") from None
    return _make(data, (x,), lambda g: [(x, g.reshape(x.shape))], "reshape")


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: [(x, g.transpose(inv))], "transpose")


def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape).copy())]

    return _make(np.asarray(data, dtype=x.data.dtype), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / float(n))


# ----------------------------------------------------------------------------
# losses


def cross_entropy(logits, targets, weights=None, smoothing=0.0):
    """Weighted negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` is (..., V) and ``targets`` matches its leading shape. Without
    ``weights`` this is the mean over positions; with ``weights`` it is
    ``sum(w_i * nll_i)``, which lets callers express per-sample means. With
    ``smoothing`` the one-hot target is mixed with the uniform distribution.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: shape mismatch {logits.shape} vs {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"cross_entropy: target index out of range for vocab {V}")
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if weights is None:
        w = np.full(t.shape, 1.0 / max(t.size, 1), dtype=flat.dtype)
    else:
        w = np.asarray(weights, dtype=flat.dtype).reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(t.size), t]
    if smoothing:
        nll = (1.0 - smoothing) * nll + smoothing * (lse - z.mean(axis=1))
    data = np.asarray((w * nll).sum(), dtype=flat.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(t.size), t] -= 1.0 - smoothing
        if smoothing:
            p -= smoothing / V
        p *= (w * g)[:, None]
        return [(logits, p.reshape(logits.shape))]

    return _make(data, (logits,), backward, "cross_entropy")


# ----------------------------------------------------------------------------
# backward


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to every leaf requiring them.

    The tape below ``loss`` is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    result = GradMap()
    if not loss.requires_grad:
        return result
    grads = {id(loss): np.ones_like(loss.data)}
    order = _topo(loss)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node in result:
                result[node] = result[node] + g
            else:
                result[node] = g
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._prev = ()
            node._backward = None
    return result


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    gm = backward(loss)
    return [gm[t] for t in wrt]
