"""Trainable heads on top of layer-aggregated frames.

SID / ER head::

    aggregate -> linear(proj_dim) -> [channel dropout] -> pool
              -> [linear(post_proj_dim)] -> linear(num_classes)

SV head::

    aggregate -> linear(proj_dim) -> TDNN (dilated 1-D convs + ReLU)
              -> [channel dropout] -> pool -> linear(embed_dim) = embedding
    loss = AM-softmax(embedding, class weights)

The embedding is the pre-nonlinearity output of the first layer after
pooling. Convolutions are "valid": a layer with kernel k and dilation d
shortens the sequence by (k - 1) * d frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from corrpool.core import ops
from corrpool.core.rng import SeededRng
from corrpool.core.tensor import Parameter, Tensor, as_tensor
from corrpool.errors import InsufficientFramesError, ParameterError, ShapeError
from corrpool.layerwise import LayerStack, LayerWeights, aggregate
from corrpool.pooling import DEFAULT_EPSILON, DropoutMask, PoolingMethod, draw_channel_dropout, pool

TASKS = ("sid", "er", "sv")


def _glorot(gen: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape)


class _ConfigMixin:
    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class SidConfig(_ConfigMixin):
    input_dim: int
    num_classes: int
    pooling: str = "mean"
    proj_dim: int = 256
    # None -> 256 for correlation pooling, no projection otherwise; 0 disables
    post_proj_dim: int | None = None
    dropout: float = 0.0
    dropout_placement: str = "before"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "pooling", PoolingMethod.parse(self.pooling).value)
        if min(self.input_dim, self.num_classes, self.proj_dim) < 1:
            raise ParameterError("input_dim, num_classes and proj_dim must be positive")
        if not 0.0 <= self.dropout <= 1.0:
            raise ParameterError(f"dropout must lie in [0, 1], got {self.dropout}")

    @property
    def method(self) -> PoolingMethod:
        return PoolingMethod(self.pooling)

    @property
    def resolved_post_proj(self) -> int:
        if self.post_proj_dim is None:
            return 256 if self.method is PoolingMethod.CORRELATION else 0
        return self.post_proj_dim


@dataclass(frozen=True)
class SvConfig(_ConfigMixin):
    input_dim: int
    num_classes: int
    pooling: str = "statistics"
    proj_dim: int = 512
    hidden_dim: int = 512
    # None -> 1500 for statistics pooling, 512 for correlation pooling
    final_dim: int | None = None
    embed_dim: int = 512
    kernels: tuple = (5, 3, 3, 1, 1)
    dilations: tuple = (1, 2, 3, 1, 1)
    width_divisor: int = 1
    am_scale: float = 30.0
    am_margin: float = 0.4
    dropout: float = 0.0
    dropout_placement: str = "before"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "pooling", PoolingMethod.parse(self.pooling).value)
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.method is PoolingMethod.MEAN:
            raise ParameterError("the SV head supports statistics or correlation pooling")
        if len(self.kernels) != len(self.dilations) or not self.kernels:
            raise ParameterError("kernels and dilations must be non-empty and of equal length")
        if min(self.kernels) < 1 or min(self.dilations) < 1 or self.width_divisor < 1:
            raise ParameterError("kernels, dilations and width_divisor must be positive")
        if self.am_scale <= 0 or self.am_margin < 0:
            raise ParameterError("AM-softmax needs scale > 0 and margin >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ParameterError(f"dropout must lie in [0, 1], got {self.dropout}")

    @property
    def method(self) -> PoolingMethod:
        return PoolingMethod(self.pooling)

    def _scaled(self, dim: int) -> int:
        return max(2, dim // self.width_divisor)

    @property
    def frame_dims(self) -> list[int]:
        """Output channels of each TDNN layer after applying ``width_divisor``."""
        final = self.final_dim
        if final is None:
            final = 1500 if self.method is PoolingMethod.STATISTICS else 512
        hidden = [self._scaled(self.hidden_dim)] * (len(self.kernels) - 1)
        return hidden + [self._scaled(final)]

    @property
    def resolved_proj_dim(self) -> int:
        return self._scaled(self.proj_dim)

    @property
    def resolved_embed_dim(self) -> int:
        return self._scaled(self.embed_dim)

    @property
    def receptive_field(self) -> int:
        return 1 + sum((k - 1) * d for k, d in zip(self.kernels, self.dilations))


@dataclass
class TdnnLayer:
    weight: Parameter  # kernel x in x out
    bias: Parameter
    dilation: int

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]


def conv1d(x, weight, bias, dilation: int = 1) -> Tensor:
    """Valid dilated convolution over frames: ``out[t] = sum_j x[t + j*d] @ W[j] + b``."""
    x, weight = as_tensor(x), as_tensor(weight)
    k, c_in, c_out = weight.shape
    t = x.shape[0]
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ShapeError(f"conv1d input {x.shape} does not match kernel {weight.shape}")
    t_out = t - (k - 1) * dilation
    if t_out < 1:
        raise InsufficientFramesError(f"{t} frames is below the receptive field {(k - 1) * dilation + 1}")
    xd, wd = x.data, weight.data
    out = np.zeros((t_out, c_out))
    for j in range(k):
        out += xd[j * dilation: j * dilation + t_out] @ wd[j]

    def backward(g):
        dx = dw = None
        if x.requires_grad:
            dx = np.zeros_like(xd)
            for j in range(k):
                dx[j * dilation: j * dilation + t_out] += g @ wd[j].T
        if weight.requires_grad:
            dw = np.stack([xd[j * dilation: j * dilation + t_out].T @ g for j in range(k)])
        return dx, dw

    conv = Tensor.from_op(out, (x, weight), backward, "conv1d")
    return conv if bias is None else ops.add(conv, bias)


def tdnn_frame_forward(frames, layers: list[TdnnLayer]) -> Tensor:
    """Stack of dilated convolutions, each followed by a rectifier."""
    x = as_tensor(frames)
    field_ = 1 + sum((l.kernel - 1) * l.dilation for l in layers)
    if x.shape[0] < field_:
        raise InsufficientFramesError(f"{x.shape[0]} frames is below the TDNN receptive field {field_}")
    for layer in layers:
        x = ops.relu(conv1d(x, layer.weight, layer.bias, layer.dilation))
    return x


def am_softmax_loss(embedding, class_weights, label: int, scale: float = 30.0, margin: float = 0.4) -> Tensor:
    """Additive-margin softmax over cosines between the embedding and class-weight columns.

    ``class_weights`` is embed_dim x num_classes; columns are L2-normalised
    before scoring.
    """
    if scale <= 0 or margin < 0:
        raise ParameterError("AM-softmax needs scale > 0 and margin >= 0")
    e = ops.l2_normalize(embedding, axis=0)
    w = ops.l2_normalize(class_weights, axis=0)
    cos = ops.linear(e, w)
    offset = np.zeros(cos.shape[0])
    offset[label] = -margin
    return ops.cross_entropy(ops.scale(ops.add(cos, offset), scale), label)


class _Head:
    config: SidConfig | SvConfig
    params: dict[str, Parameter]

    def parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self.params.items())


class SidHead(_Head):
    def __init__(self, config: SidConfig, rng: SeededRng):
        self.config = config
        gen = rng.numpy_generator()
        c = config
        p = c.proj_dim
        pooled = c.method.output_dim(p)
        post = c.resolved_post_proj
        self.params = {
            "proj.w": Parameter(_glorot(gen, c.input_dim, p, (c.input_dim, p)), name="proj.w"),
            "proj.b": Parameter(np.zeros(p), name="proj.b"),
        }
        feat = pooled
        if post:
            self.params["post.w"] = Parameter(_glorot(gen, pooled, post, (pooled, post)), name="post.w")
            self.params["post.b"] = Parameter(np.zeros(post), name="post.b")
            feat = post
        self.params["cls.w"] = Parameter(_glorot(gen, feat, c.num_classes, (feat, c.num_classes)), name="cls.w")
        self.params["cls.b"] = Parameter(np.zeros(c.num_classes), name="cls.b")


class SvHead(_Head):
    def __init__(self, config: SvConfig, rng: SeededRng):
        self.config = config
        gen = rng.numpy_generator()
        c = config
        p = c.resolved_proj_dim
        self.params = {
            "proj.w": Parameter(_glorot(gen, c.input_dim, p, (c.input_dim, p)), name="proj.w"),
            "proj.b": Parameter(np.zeros(p), name="proj.b"),
        }
        c_in = p
        for i, (k, c_out) in enumerate(zip(c.kernels, c.frame_dims)):
            name = f"tdnn{i}"
            w = _glorot(gen, k * c_in, c_out, (k, c_in, c_out))
            self.params[f"{name}.w"] = Parameter(w, name=f"{name}.w")
            self.params[f"{name}.b"] = Parameter(np.zeros(c_out), name=f"{name}.b")
            c_in = c_out
        pooled = c.method.output_dim(c_in)
        e = c.resolved_embed_dim
        self.params["embed.w"] = Parameter(_glorot(gen, pooled, e, (pooled, e)), name="embed.w")
        self.params["embed.b"] = Parameter(np.zeros(e), name="embed.b")
        self.params["am.w"] = Parameter(gen.standard_normal((e, c.num_classes)), name="am.w")

    @property
    def tdnn(self) -> list[TdnnLayer]:
        return [
            TdnnLayer(self.params[f"tdnn{i}.w"], self.params[f"tdnn{i}.b"], d)
            for i, d in enumerate(self.config.dilations)
        ]


def _stack_tensor(stack) -> Tensor:
    if isinstance(stack, LayerStack):
        return Tensor(stack.layers, _copy=False)
    return as_tensor(stack)


def _dropout_mask(config, d: int, training: bool, rng: SeededRng | None, mask: DropoutMask | None):
    if config.method is not PoolingMethod.CORRELATION:
        return None
    if mask is not None:
        return mask
    if not training or config.dropout <= 0.0:
        return None
    if rng is None:
        raise ParameterError("training with channel dropout needs an RNG")
    return draw_channel_dropout(d, config.dropout, rng)


def sid_forward(stack, head: SidHead, weights: LayerWeights, training: bool = False,
                rng: SeededRng | None = None, mask: DropoutMask | None = None) -> Tensor:
    """Class logits for one utterance. ``mask`` overrides the dropout draw."""
    c = head.config
    stack = _stack_tensor(stack)
    if stack.ndim != 3 or stack.shape[2] != c.input_dim:
        raise ShapeError(f"stack of shape {stack.shape} does not match head input_dim {c.input_dim}")
    p = head.params
    h = aggregate(stack, weights)
    x = ops.linear(h, p["proj.w"], p["proj.b"])
    m = _dropout_mask(c, c.proj_dim, training, rng, mask)
    r = pool(x, c.method, m, c.epsilon, c.dropout_placement).tensor
    if "post.w" in p:
        r = ops.linear(r, p["post.w"], p["post.b"])
    return ops.linear(r, p["cls.w"], p["cls.b"])


def sv_forward(stack, head: SvHead, weights: LayerWeights, training: bool = False,
               rng: SeededRng | None = None, mask: DropoutMask | None = None) -> Tensor:
    """Speaker embedding for one utterance."""
    c = head.config
    stack = _stack_tensor(stack)
    if stack.ndim != 3 or stack.shape[2] != c.input_dim:
        raise ShapeError(f"stack of shape {stack.shape} does not match head input_dim {c.input_dim}")
    p = head.params
    h = aggregate(stack, weights)
    x = ops.linear(h, p["proj.w"], p["proj.b"])
    x = tdnn_frame_forward(x, head.tdnn)
    m = _dropout_mask(c, x.shape[1], training, rng, mask)
    r = pool(x, c.method, m, c.epsilon, c.dropout_placement).tensor
    return ops.linear(r, p["embed.w"], p["embed.b"])


class DownstreamModel:
    """Layer weights plus a task head; the unit that is trained and checkpointed."""

    def __init__(self, task: str, head: SidHead | SvHead, weights: LayerWeights, labels: list[str]):
        if task not in TASKS:
            raise ParameterError(f"unknown task {task!r}; choose from {TASKS}")
        self.task = task
        self.head = head
        self.weights = weights
        self.labels = list(labels)

    @classmethod
    def build(cls, task: str, head_config: dict, num_layers: int, labels: list[str], seed: int) -> "DownstreamModel":
        rng = SeededRng(seed)
        cfg = dict(head_config, num_classes=len(labels))
        if task == "sv":
            head = SvHead(SvConfig.from_dict(cfg), rng)
        else:
            head = SidHead(SidConfig.from_dict(cfg), rng)
        return cls(task, head, LayerWeights.uniform(num_layers), labels)

    @property
    def config(self):
        return self.head.config

    def parameters(self) -> dict[str, Parameter]:
        out = {"layer_logits": self.weights.logits}
        out.update(self.head.params)
        return out

    def forward(self, stack, training: bool = False, rng: SeededRng | None = None,
                mask: DropoutMask | None = None) -> Tensor:
        """Logits for SID/ER, embedding for SV."""
        fwd = sv_forward if self.task == "sv" else sid_forward
        return fwd(stack, self.head, self.weights, training, rng, mask)

    def loss(self, stack, label: int, training: bool = True, rng: SeededRng | None = None,
             mask: DropoutMask | None = None) -> Tensor:
        out = self.forward(stack, training, rng, mask)
        if self.task == "sv":
            c = self.head.config
            return am_softmax_loss(out, self.head.params["am.w"], label, c.am_scale, c.am_margin)
        return ops.cross_entropy(out, label)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise ShapeError(f"parameter names differ: {sorted(set(arrays) ^ set(params))}")
        for k, v in arrays.items():
            params[k].assign(v)
