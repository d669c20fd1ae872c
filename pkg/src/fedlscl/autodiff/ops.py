"""Differentiable primitives.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one shape must be a trailing suffix of the other (expansion over leading batch
dimensions), or one operand must be a scalar.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(op, a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), back)


def _matmul_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(op, a.shape, b.shape)
    _check_broadcast(op, a.shape[:-2], b.shape[:-2])


def matmul(a, b) -> Tensor:
    """``a @ b`` over the last two axes; leading batch dims may expand."""
    a, b = as_tensor(a), as_tensor(b)
    _matmul_check("matmul", a, b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return make_result("matmul", a.data @ b.data, (a, b), back)


def bmm(a, b) -> Tensor:
    """Per-sample matmul: both operands carry the same batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("bmm", a.shape, b.shape)
    _matmul_check("bmm", a, b)
    return matmul(a, b)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return make_result("gelu", out, (x,), back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return make_result("tanh", t, (x,), lambda g: (g * (1.0 - t**2),))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", y, (x,), back)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layernorm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return make_result("layernorm", xhat * gain.data + bias.data, (x, gain, bias), back)


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", np.asarray(out), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return make_result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    perm = list(range(x.ndim))
    perm[a], perm[b] = perm[b], perm[a]
    return transpose(x, perm)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)

    def back(g):
        z = np.zeros_like(x.data)
        np.add.at(z, index, g)
        return (z,)

    return make_result("slice", out, (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, ts, back)


def take(x, indices, axis: int = 0) -> Tensor:
    """Row gather along ``axis`` (embedding lookup when ``axis=0``)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise ShapeError("take", x.shape, idx.shape)
    out = np.take(x.data, idx, axis=axis)

    def back(g):
        z = np.zeros_like(x.data)
        zm = np.moveaxis(z, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(zm, idx, gm)
        return (z,)

    return make_result("take", out, (x,), back)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_result("log_softmax", out, (x,), back)


def cross_entropy(logits, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy on (N, C) logits with integer targets."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    n, c = logits.shape
    if n and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"cross_entropy: target outside [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    per_sample = -logp[rows, y]
    p = np.exp(logp)

    if reduction == "none":
        def back(g):
            d = p.copy()
            d[rows, y] -= 1.0
            return (d * g[:, None],)

        return make_result("cross_entropy", per_sample, (logits,), back)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")

    def back_mean(g):
        d = p.copy()
        d[rows, y] -= 1.0
        return (d * (g / n),)

    return make_result("cross_entropy", np.asarray(per_sample.mean()), (logits,), back_mean)


def sq_l2(a, b) -> Tensor:
    """Squared Euclidean distance over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sq_l2", a.shape, b.shape)
    diff = a.data - b.data
    out = np.asarray((diff**2).sum(axis=-1))

    def back(g):
        gd = 2.0 * diff * np.expand_dims(g, -1)
        return gd, -gd

    return make_result("sq_l2", out, (a, b), back)
