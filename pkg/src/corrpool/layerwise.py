"""Softmax-weighted collapse of aligned per-layer representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from corrpool.core import ops
from corrpool.core.tensor import Parameter, Tensor, as_tensor
from corrpool.errors import ShapeError


@dataclass(frozen=True)
class LayerStack:
    """Per-layer frames of one utterance, shape (L+1, T, D); layer 0 is the front-end output."""

    layers: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.layers, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"layer stack must be (L+1) x T x D, got shape {arr.shape}")
        object.__setattr__(self, "layers", arr)

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def num_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    def permute_frames(self, order) -> "LayerStack":
        return LayerStack(self.layers[:, np.asarray(order), :])


class LayerWeights:
    """Learnable logits whose softmax gives the per-layer mixing weights."""

    def __init__(self, logits: Parameter):
        self.logits = logits

    @classmethod
    def uniform(cls, num_layers: int, trainable: bool = True) -> "LayerWeights":
        return cls(Parameter(np.zeros(num_layers), trainable=trainable, name="layer_logits"))

    @classmethod
    def from_logits(cls, logits, trainable: bool = True) -> "LayerWeights":
        return cls(Parameter(np.asarray(logits, dtype=np.float64).reshape(-1), trainable=trainable,
                             name="layer_logits"))

    @property
    def num_layers(self) -> int:
        return self.logits.shape[0]

    @property
    def trainable(self) -> bool:
        return self.logits.trainable

    def gammas(self) -> np.ndarray:
        return ops.softmax(Tensor(self.logits.data)).data.copy()

    def __eq__(self, other):
        if not isinstance(other, LayerWeights):
            return NotImplemented
        return self.trainable == other.trainable and np.array_equal(self.logits.data, other.logits.data)

    def __repr__(self):
        return f"LayerWeights(gammas={np.round(self.gammas(), 4).tolist()}, trainable={self.trainable})"


def aggregate(stack, weights: LayerWeights) -> Tensor:
    """``h[t] = sum_l softmax(logits)[l] * stack[l, t]``."""
    if isinstance(stack, LayerStack):
        stack = Tensor(stack.layers, _copy=False)
    stack = as_tensor(stack)
    if stack.ndim != 3:
        raise ShapeError(f"layer stack must be rank 3, got shape {stack.shape}")
    if stack.shape[0] != weights.num_layers:
        raise ShapeError(f"{weights.num_layers} layer weights for a stack of {stack.shape[0]} layers")
    gamma = ops.softmax(weights.logits)
    g_data, s_data = gamma.data, stack.data
    out = np.tensordot(g_data, s_data, axes=(0, 0))

    def backward(g):
        d_gamma = np.tensordot(s_data, g, axes=([1, 2], [0, 1])) if gamma.requires_grad else None
        d_stack = g_data[:, None, None] * g[None] if stack.requires_grad else None
        return d_gamma, d_stack

    return Tensor.from_op(out, (gamma, stack), backward, "layer_aggregate")


def freeze_weights(weights: LayerWeights) -> LayerWeights:
    return LayerWeights.from_logits(weights.logits.data.copy(), trainable=False)


def export_weights(weights: LayerWeights) -> list[tuple[int, float]]:
    return [(i, float(g)) for i, g in enumerate(weights.gammas())]


def format_weights_table(weights: LayerWeights) -> str:
    """Two whitespace-separated columns: layer index and weight."""
    return "".join(f"{i}\t{g:.8f}\n" for i, g in export_weights(weights))
