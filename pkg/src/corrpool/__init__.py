"""Utterance-level pooling of frozen multi-layer frame features.

Mean, statistics and correlation pooling, layerwise softmax aggregation,
SID/ER and SV downstream heads trained with a small reverse-mode autodiff
core, plus metrics, file formats and a synthetic data generator.
"""

from corrpool.downstream import DownstreamModel, SidConfig, SvConfig
from corrpool.layerwise import LayerStack, LayerWeights, aggregate, export_weights
from corrpool.metrics import Trial, accuracy, eer, fuse_logits
from corrpool.pooling import (
    DropoutMask,
    PooledVector,
    PoolingMethod,
    correlation_pool,
    mean_pool,
    pool,
    statistics_pool,
)

__version__ = "0.1.0"

__all__ = [
    "DownstreamModel",
    "DropoutMask",
    "LayerStack",
    "LayerWeights",
    "PooledVector",
    "PoolingMethod",
    "SidConfig",
    "SvConfig",
    "Trial",
    "accuracy",
    "aggregate",
    "correlation_pool",
    "eer",
    "export_weights",
    "fuse_logits",
    "mean_pool",
    "pool",
    "statistics_pool",
]
