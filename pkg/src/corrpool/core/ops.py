"""Differentiable primitives shared by the pooling layers and the heads."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from corrpool.core.tensor import Tensor, as_tensor
from corrpool.errors import NormalizationError, ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b) -> Tensor:
    """Rank-2 matrix product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor.from_op(ad @ bd, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), backward, "add")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for a rank-1 or rank-2 ``x``."""
    x = as_tensor(x)
    if x.ndim == 1:
        out = matmul(reshape(x, (1, -1)), weight)
        out = reshape(out, (out.shape[1],))
    else:
        out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return Tensor.from_op(x.data.reshape(shape), (x,), backward, "reshape")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor.from_op(ad * bd, (a, b), backward, "multiply")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g * c,)

    return Tensor.from_op(x.data * c, (x,), backward, "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return Tensor.from_op(np.where(active, x.data, 0.0), (x,), backward, "relu")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.array(x.data.sum()), (x,), backward, "sum")


def softmax(x) -> Tensor:
    """Softmax of a rank-1 tensor, max-shifted for stability."""
    x = as_tensor(x)
    z = x.data - x.data.max()
    p = np.exp(z)
    p /= p.sum()

    def backward(g):
        return (p * (g - np.dot(g, p)),)

    return Tensor.from_op(p, (x,), backward, "softmax")


def log_sum_exp(z: np.ndarray) -> float:
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()))


def cross_entropy(logits, label: int) -> Tensor:
    """Negative log-softmax of ``logits`` at ``label``."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ShapeError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits.data
    lse = log_sum_exp(z)
    loss = lse - z[label]

    def backward(g):
        p = np.exp(z - lse)
        p[label] -= 1.0
        return (g * p,)

    return Tensor.from_op(np.array(loss), (logits,), backward, "cross_entropy")


def l2_normalize(x, axis: int = 0) -> Tensor:
    """Unit-norm rows/columns; raises on an all-zero slice."""
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise NormalizationError("cannot L2-normalize a zero vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor.from_op(y, (x,), backward, "l2_normalize")
