from corrpool.core.gradcheck import grad_check
from corrpool.core.ops import (
    add,
    concat,
    cross_entropy,
    l2_normalize,
    linear,
    matmul,
    multiply,
    relu,
    reshape,
    scale,
    softmax,
    sum_all,
)
from corrpool.core.rng import SeededRng
from corrpool.core.tensor import Parameter, Tensor, as_tensor, backward, no_grad

__all__ = [
    "Parameter",
    "SeededRng",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cross_entropy",
    "grad_check",
    "l2_normalize",
    "linear",
    "matmul",
    "multiply",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sum_all",
]
