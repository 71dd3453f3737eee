from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from corrpool.core.tensor import Parameter, Tensor, backward
from corrpool.errors import NonFiniteError, ParameterError


def _evaluate(f: Callable[[], Tensor]) -> float:
    try:
        out = f()
    except NonFiniteError as exc:
        raise NonFiniteError(f"loss evaluation failed: {exc}") from exc
    value = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
    if not np.isfinite(value):
        raise NonFiniteError("loss evaluated to a non-finite value")
    return value


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], epsilon: float = 1e-6) -> float:
    """Compare analytic gradients with central differences.

    ``f`` must rebuild the graph on each call and be deterministic (fix any
    dropout mask by reseeding inside ``f``). Returns the largest
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)`` over every entry
    of every trainable parameter; 0.0 when there is nothing to check.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ParameterError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    trainable = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    loss = f()
    _evaluate(lambda: loss)
    if not trainable:
        return 0.0
    backward(loss)
    analytic = [p.grad.copy() for p in trainable]

    worst = 0.0
    for p, grad in zip(trainable, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = _evaluate(f)
            flat[i] = orig - epsilon
            minus = _evaluate(f)
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
