"""Temporal pooling of a T x D frame sequence into one utterance vector.

Three methods are provided:

* mean: per-channel temporal average (length D)
* statistics: mean concatenated with population std (length 2D)
* correlation: standardise each channel over time, average the frame outer
  products into a D x D correlation matrix and keep the entries strictly
  above the diagonal, row-major (i < j, i outer), length D(D-1)/2

Correlation pooling can be regularised with channel dropout: whole channels
are zeroed before standardisation, which yields zero rows and columns in the
correlation matrix. Kept channels are not rescaled.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from corrpool.core import ops
from corrpool.core.rng import SeededRng
from corrpool.core.tensor import Tensor, as_tensor
from corrpool.errors import EmptyUtteranceError, InsufficientFramesError, ParameterError, ShapeError

DEFAULT_EPSILON = 1e-8


class PoolingMethod(str, Enum):
    MEAN = "mean"
    STATISTICS = "statistics"
    CORRELATION = "correlation"

    @classmethod
    def parse(cls, name) -> "PoolingMethod":
        if isinstance(name, cls):
            return name
        key = str(name).lower()
        try:
            return _ALIASES[key]
        except KeyError:
            raise ParameterError(f"unknown pooling method {name!r}; choose from {sorted(_ALIASES)}") from None

    def output_dim(self, d: int) -> int:
        if self is PoolingMethod.MEAN:
            return d
        if self is PoolingMethod.STATISTICS:
            return 2 * d
        return d * (d - 1) // 2


_ALIASES = {
    "mean": PoolingMethod.MEAN,
    "statistics": PoolingMethod.STATISTICS,
    "stats": PoolingMethod.STATISTICS,
    "meanstd": PoolingMethod.STATISTICS,
    "correlation": PoolingMethod.CORRELATION,
    "corr": PoolingMethod.CORRELATION,
}


@dataclass(frozen=True)
class PooledVector:
    tensor: Tensor
    method: PoolingMethod
    source_dim: int
    source_frames: int

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __len__(self):
        return self.tensor.shape[0]


@dataclass(frozen=True)
class DropoutMask:
    """Channels to keep. ``seed`` is the RNG state the mask was drawn from."""

    kept: np.ndarray
    probability: float
    seed: int

    @classmethod
    def keep_all(cls, d: int) -> "DropoutMask":
        return cls(np.ones(d, dtype=bool), 0.0, 0)

    @property
    def dim(self) -> int:
        return int(self.kept.shape[0])


def draw_channel_dropout(d: int, probability: float, rng: SeededRng) -> DropoutMask:
    """Drop each of ``d`` channels independently with ``probability``."""
    if not 0.0 <= probability <= 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1], got {probability}")
    seed = rng.get_state()
    return DropoutMask(rng.bernoulli_keep(d, probability), float(probability), seed)


def _frames(frames) -> Tensor:
    frames = as_tensor(frames)
    if frames.ndim != 2:
        raise ShapeError(f"expected a T x D frame matrix, got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise EmptyUtteranceError("utterance has no frames")
    return frames


def temporal_mean(frames) -> Tensor:
    x = _frames(frames)
    t = x.shape[0]

    def backward(g):
        return (np.broadcast_to(g / t, x.shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=0), (x,), backward, "temporal_mean")


def temporal_std(frames) -> Tensor:
    """Population std per channel; the derivative is clamped to 0 where std == 0."""
    x = _frames(frames)
    t = x.shape[0]
    dev = x.data - x.data.mean(axis=0)
    std = np.sqrt((dev**2).mean(axis=0))

    def backward(g):
        safe = np.where(std > 0, std, 1.0)
        coef = np.where(std > 0, g / (t * safe), 0.0)
        return (dev * coef,)

    return Tensor.from_op(std, (x,), backward, "temporal_std")


def standardize(frames, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Zero-mean, unit-std channels over time.

    Channels whose std is at most ``epsilon`` become all zeros and pass no
    gradient.
    """
    x = _frames(frames)
    t = x.shape[0]
    if t < 2:
        raise InsufficientFramesError(f"standardisation needs at least 2 frames, got {t}")
    dev = x.data - x.data.mean(axis=0)
    std = np.sqrt((dev**2).mean(axis=0))
    live = std > epsilon
    inv = np.where(live, 1.0 / np.where(live, std, 1.0), 0.0)
    out = dev * inv

    def backward(g):
        # d o / d x for o = (x - mean) / std, population moments
        gm = g.mean(axis=0)
        gom = (g * out).mean(axis=0)
        return (inv * (g - gm - out * gom),)

    return Tensor.from_op(out, (x,), backward, "standardize")


def frame_correlation(standardized) -> Tensor:
    """``(1/T) * sum_t o_t o_t^T`` for standardised frames ``o``."""
    o = as_tensor(standardized)
    t = o.shape[0]
    od = o.data

    def backward(g):
        return (od @ (g + g.T) / t,)

    return Tensor.from_op(od.T @ od / t, (o,), backward, "frame_correlation")


def upper_triangle(matrix) -> Tensor:
    """Entries strictly above the diagonal, row-major."""
    c = as_tensor(matrix)
    d = c.shape[0]
    if c.ndim != 2 or c.shape[1] != d:
        raise ShapeError(f"expected a square matrix, got shape {c.shape}")
    rows, cols = np.triu_indices(d, k=1)

    def backward(g):
        full = np.zeros((d, d))
        full[rows, cols] = g
        return (full,)

    return Tensor.from_op(c.data[rows, cols], (c,), backward, "upper_triangle")


def apply_channel_mask(frames, mask: DropoutMask) -> Tensor:
    x = as_tensor(frames)
    if mask.dim != x.shape[-1]:
        raise ShapeError(f"dropout mask has {mask.dim} channels but frames have {x.shape[-1]}")
    return ops.multiply(x, mask.kept.astype(np.float64))


def mean_pool(frames) -> PooledVector:
    x = _frames(frames)
    return PooledVector(temporal_mean(x), PoolingMethod.MEAN, x.shape[1], x.shape[0])


def statistics_pool(frames) -> PooledVector:
    x = _frames(frames)
    out = ops.concat([temporal_mean(x), temporal_std(x)])
    return PooledVector(out, PoolingMethod.STATISTICS, x.shape[1], x.shape[0])


def correlation_pool(
    frames,
    mask: DropoutMask | None = None,
    epsilon: float = DEFAULT_EPSILON,
    dropout_placement: str = "before",
) -> PooledVector:
    """Correlation pooling with optional channel dropout.

    ``dropout_placement`` selects whether the mask is applied before
    standardisation (default) or to the standardised frames. Because
    standardisation is per channel, both placements give the same output.
    """
    x = _frames(frames)
    t, d = x.shape
    if t < 2:
        raise InsufficientFramesError(f"correlation pooling needs at least 2 frames, got {t}")
    if dropout_placement not in ("before", "after"):
        raise ParameterError(f"dropout_placement must be 'before' or 'after', got {dropout_placement!r}")
    if mask is not None and mask.dim != d:
        raise ShapeError(f"dropout mask has {mask.dim} channels but frames have {d}")
    if mask is not None and dropout_placement == "before":
        x = apply_channel_mask(x, mask)
    o = standardize(x, epsilon)
    if mask is not None and dropout_placement == "after":
        o = apply_channel_mask(o, mask)
    vec = upper_triangle(frame_correlation(o))
    return PooledVector(vec, PoolingMethod.CORRELATION, d, t)


def pool(frames, method, mask: DropoutMask | None = None, epsilon: float = DEFAULT_EPSILON,
         dropout_placement: str = "before") -> PooledVector:
    method = PoolingMethod.parse(method)
    if method is PoolingMethod.MEAN:
        return mean_pool(frames)
    if method is PoolingMethod.STATISTICS:
        return statistics_pool(frames)
    return correlation_pool(frames, mask, epsilon, dropout_placement)
