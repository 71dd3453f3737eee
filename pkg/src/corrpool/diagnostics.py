"""Toy instances for end-to-end gradient checks of every head configuration."""

from __future__ import annotations

import numpy as np

from corrpool.core.gradcheck import grad_check
from corrpool.core.rng import SeededRng
from corrpool.downstream import DownstreamModel
from corrpool.layerwise import LayerStack
from corrpool.pooling import DropoutMask, PoolingMethod

TOY_SID_HEAD = {"proj_dim": 5, "post_proj_dim": 4}
TOY_SV_HEAD = {
    "proj_dim": 6,
    "hidden_dim": 5,
    "final_dim": 5,
    "embed_dim": 4,
    "kernels": (3, 3, 1),
    "dilations": (1, 2, 1),
}


def toy_model(task: str, pooling: str, seed: int = 0, num_classes: int = 0, dim: int = 6,
              num_layers: int = 3) -> DownstreamModel:
    method = PoolingMethod.parse(pooling)
    head = dict(TOY_SV_HEAD if task == "sv" else TOY_SID_HEAD, input_dim=dim, pooling=method.value)
    if task != "sv" and method is not PoolingMethod.CORRELATION:
        head["post_proj_dim"] = 0
    n = num_classes or (3 if task == "sv" else 2)
    model = DownstreamModel.build(task, head, num_layers, [f"c{i}" for i in range(n)], seed)
    # move layer logits off zero so the softmax Jacobian is not at its symmetric point
    gen = SeededRng(seed + 1).numpy_generator()
    model.weights.logits.assign(gen.normal(0.0, 0.5, size=num_layers))
    return model


def toy_gradcheck(task: str = "sid", pooling: str = "correlation", dropout: float = 0.0, seed: int = 0,
                  frames: int | None = None, epsilon: float = 1e-6) -> float:
    """Max relative gradient error of loss(model(toy stack)) over all parameters.

    SID/ER use T=8, SV uses T=16; D=6 and three layers throughout. A
    non-zero ``dropout`` draws one mask and keeps it fixed for every
    evaluation.
    """
    model = toy_model(task, pooling, seed)
    t = frames or (16 if task == "sv" else 8)
    gen = SeededRng(seed + 2).numpy_generator()
    stack = LayerStack(gen.standard_normal((model.weights.num_layers, t, 6)) @ _mixing(gen))
    label = 1
    mask = None
    if dropout > 0 and PoolingMethod.parse(pooling) is PoolingMethod.CORRELATION:
        width = model.config.proj_dim if task != "sv" else model.config.frame_dims[-1]
        kept = SeededRng(seed + 3).bernoulli_keep(width, dropout)
        kept[:2] = True  # keep at least one correlation entry alive
        mask = DropoutMask(kept, dropout, seed + 3)

    def loss():
        return model.loss(stack, label, training=True, rng=None, mask=mask)

    return grad_check(loss, list(model.parameters().values()), epsilon)


def _mixing(gen: np.random.Generator) -> np.ndarray:
    m = gen.standard_normal((6, 6))
    return m / np.linalg.norm(m, axis=0, keepdims=True)
