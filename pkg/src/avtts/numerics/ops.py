"""Differentiable ops over :class:`Tensor`.

Broadcasting follows numpy rules; gradients are summed back over every
expanded axis.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result

MASK_VALUE = -1e9


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` of any rank flattened to 2-D for one GEMM."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(*lead, w.shape[1]), parents, backward, "linear")


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return make_result(x.data.transpose(axes), (x,), backward, "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "broadcast_to")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    fancy = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and builtins.any(isinstance(i, (np.ndarray, list)) for i in idx)
    )

    def backward(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), backward, "index")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), np.asarray(1.0 / n, dtype=x.dtype))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or builtins.any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_result(out, (x,), backward, "exp")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return make_result(x.data * positive, (x,), backward, "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; a constant row maps to zeros before gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gxhat = g * gain.data if gain is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) if x.requires_grad else None
        lead = tuple(range(x.ndim - 1))
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.sum(axis=lead) if bias.requires_grad else None)
        return tuple(grads)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return make_result(out.astype(x.dtype, copy=False), parents, backward, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result(table.data[ids], (table,), backward, "embedding")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 1-D convolution.

    ``x`` is (batch, time, in_channels), ``w`` is (kernel, in_channels,
    out_channels). Zero padding is split with the extra tap on the right.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {w.shape}")
    batch, steps, cin = x.shape
    k, _, cout = w.shape
    left = (k - 1) // 2
    right = k - 1 - left
    padded = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    # (B, T, Cin, K) -> (B, T, K, Cin) so columns line up with w.reshape(K*Cin, Cout)
    cols = sliding_window_view(padded, k, axis=1).transpose(0, 1, 3, 2).reshape(batch * steps, k * cin)
    w2 = w.data.reshape(k * cin, cout)
    out = cols @ w2
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(batch * steps, cout)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(batch, steps, k, cin)
            gpad = np.zeros_like(padded)
            for tap in range(k):
                gpad[:, tap:tap + steps] += gcols[:, :, tap]
            gx = gpad[:, left:left + steps]
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(batch, steps, cout), parents, backward, "conv1d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return mul(x, keep)


def gather_rows(x: Tensor, positions: np.ndarray, valid: np.ndarray) -> Tensor:
    """``out[b, t] = x[b, positions[b, t]]`` where ``valid`` else zeros."""
    batch, length = x.shape[:2]
    if positions.shape != valid.shape or positions.shape[0] != batch:
        raise ShapeError(f"gather_rows: positions {positions.shape} vs input {x.shape}")
    flat = x.data.reshape(batch * length, *x.shape[2:])
    rows = (np.arange(batch)[:, None] * length + positions).reshape(-1)
    keep = valid.reshape(-1).astype(bool)
    out = flat[rows] * keep.reshape(-1, *([1] * (x.ndim - 2))).astype(x.dtype)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.add.at(gflat, rows[keep], g.reshape(-1, *x.shape[2:])[keep])
        return (gflat.reshape(x.shape),)

    return make_result(out.reshape(batch, positions.shape[1], *x.shape[2:]), (x,), backward, "gather_rows")


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with an additive key mask.

    ``q``, ``k``, ``v`` are (..., time, depth); ``key_mask`` is 0/1 over
    the key axis and broadcasts against the score matrix.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scale = np.asarray(1.0 / np.sqrt(q.shape[-1]), dtype=q.dtype)
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
    if key_mask is not None:
        additive = ((1.0 - np.asarray(key_mask, dtype=q.dtype)) * MASK_VALUE).astype(q.dtype)
        scores = add(scores, additive)
    return matmul(softmax(scores, axis=-1), v)


def _masked_reduce(pred: Tensor, target, mask, kind: str) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    mask = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    if target.shape != pred.shape:
        raise ShapeError(f"{kind}: prediction {pred.shape} vs target {target.shape}")
    count = max(float(mask.sum()), 1.0)
    diff = (pred.data - target) * mask
    if kind == "mse":
        value = (diff * diff).sum() / count
    else:
        value = np.abs(diff).sum() / count

    def backward(g):
        if kind == "mse":
            return (g * 2.0 * diff / count,)
        return (g * np.sign(diff) * mask / count,)

    return make_result(np.asarray(value, dtype=pred.dtype), (pred,), backward, f"masked_{kind}")


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over positions where ``mask`` is 1."""
    return _masked_reduce(pred, target, mask, "mse")


def masked_mae(pred: Tensor, target, mask) -> Tensor:
    """Mean absolute error over positions where ``mask`` is 1."""
    return _masked_reduce(pred, target, mask, "mae")
