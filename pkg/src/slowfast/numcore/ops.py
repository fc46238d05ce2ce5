"""Differentiable primitives.

Every op takes :class:`Tensor` inputs (plain arrays are accepted for
constant operands), computes the forward value with numpy and records a
backward closure on the active tape.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_or_raise(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold the batch dims into one big matmul
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record(out, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_or_raise("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_or_raise("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = _t(x)
    return record(x.data * c, (x,), lambda g: (g * c,))


def tanh(x) -> Tensor:
    x = _t(x)
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _t(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply elementwise gain and bias."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: input {x.shape} needs gain/bias of shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record(xhat * gd + beta.data, (x, gamma, beta), bw)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _t(x)
    xd = x.data
    # in-place arithmetic: elementwise temporaries dominate this op's cost
    x2 = xd * xd
    u = x2 * (0.044715 * _SQRT_2_OVER_PI)
    u += _SQRT_2_OVER_PI
    u *= xd
    th = np.tanh(u, out=u)
    y = th + 1.0
    y *= xd
    y *= 0.5

    def bw(g):
        half_du = x2 * (1.5 * 0.044715 * _SQRT_2_OVER_PI)
        half_du += 0.5 * _SQRT_2_OVER_PI
        s = th * th
        np.subtract(1.0, s, out=s)
        s *= xd
        s *= half_du
        s += 0.5
        s += 0.5 * th
        s *= g
        return (s,)

    return record(y, (x,), bw)


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` (V x D) selected by integer ``ids`` of any shape."""
    table = _t(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if table.data.ndim != 2:
        raise ValueError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding_lookup: ids out of range for table {table.shape}")
    v, d = table.shape

    def bw(g):
        flat = ids.reshape(-1)
        gt = np.zeros((v, d))
        np.add.at(gt, flat, g.reshape(-1, d))
        return (gt,)

    return record(table.data[ids], (table,), bw)


def reshape(x, shape) -> Tensor:
    x = _t(x)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = _t(x)
    inv = np.argsort(axes)
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    """``x[index]`` for basic slices or integer-array row selection."""
    x = _t(x)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return record(x.data[index], (x,), bw)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    shape = x.shape
    return record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = _t(x)
    shape, n = x.shape, x.size
    return record(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def cross_entropy(logits, labels, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose label != ``ignore_index``."""
    logits = _t(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ValueError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} do not match")
    valid = labels != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: every label is ignored")
    rows = np.nonzero(valid)[0]
    cols = labels[valid]
    if cols.min() < 0 or cols.max() >= logits.shape[1]:
        raise ValueError(f"cross_entropy: labels out of range for {logits.shape[1]} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[rows, cols].sum() / n

    def bw(g):
        p = np.exp(logp)
        p[rows, cols] -= 1.0
        p[~valid] = 0.0
        return (p * (float(g) / n),)

    return record(np.array(loss), (logits,), bw)
