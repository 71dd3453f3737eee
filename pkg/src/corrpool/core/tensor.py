"""Float64 tensors with tape-style reverse-mode differentiation.

Every differentiable operation produces a :class:`Tensor` that remembers its
parents and a backward closure mapping the upstream gradient to one gradient
per parent. :func:`backward` replays the recorded graph in reverse
topological order and accumulates into the ``grad`` slot of every trainable
:class:`Parameter` it reaches.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from corrpool.errors import NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Skip graph recording (inference)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, *, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else np.asarray(data, dtype=np.float64).view()
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = False
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "input"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced NaN or Inf")
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.op = op
        out.requires_grad = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        else:
            out.parents = ()
            out.backward_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar for the handful of ops used in model code
    def __matmul__(self, other):
        from corrpool.core.ops import matmul

        return matmul(self, other)

    def __add__(self, other):
        from corrpool.core.ops import add

        return add(self, other)


class Parameter(Tensor):
    """A trainable leaf. ``grad`` always has the shape of ``data``."""

    __slots__ = ("grad", "trainable", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"parameter {name!r} contains NaN or Inf")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.trainable = bool(trainable)
        self.requires_grad = self.trainable
        self.parents = ()
        self.backward_fn = None
        self.op = "parameter"
        self.name = name

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.requires_grad = self.trainable
        if not flag:
            self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter of shape {self.data.shape}")
        self.data = value.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(param) into ``param.grad`` for every trainable parameter."""
    if not root.requires_grad:
        return
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward from non-scalar of shape {root.shape} needs an explicit gradient")
        grad = np.ones_like(root.data)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if node.trainable:
                node.grad = node.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
