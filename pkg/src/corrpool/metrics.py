"""Evaluation metrics and score-level fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from corrpool.errors import AlignmentError, NormalizationError, ParameterError

TARGET = "target"
NONTARGET = "nontarget"


@dataclass(frozen=True)
class Trial:
    trial_id: str
    score: float
    is_target: bool


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ParameterError("accuracy needs a non-empty (utterances x classes) logit matrix")
    if labels.shape != (logits.shape[0],):
        raise ParameterError(f"{logits.shape[0]} logit rows but {labels.size} labels")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _split_scores(scores) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, tuple) and len(scores) == 2:
        tar, non = (np.asarray(s, dtype=np.float64).reshape(-1) for s in scores)
    else:
        trials = list(scores)
        tar = np.array([t.score for t in trials if t.is_target], dtype=np.float64)
        non = np.array([t.score for t in trials if not t.is_target], dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ParameterError("EER needs at least one target and one non-target trial")
    return tar, non


def roc_points(target_scores, nontarget_scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR and FRR at every distinct score used as threshold, plus +inf.

    A trial is accepted when its score is >= the threshold. Returns
    ``(thresholds, far, frr)`` with thresholds ascending, so FAR is
    non-increasing and FRR non-decreasing.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    return thresholds, far, frr


def eer(scores) -> float:
    """Equal error rate.

    ``scores`` is an iterable of :class:`Trial` or a ``(target_scores,
    nontarget_scores)`` pair. The crossing of FAR and FRR is located between
    the two consecutive ROC points where FAR - FRR changes sign and the rate
    is linearly interpolated there.
    """
    tar, non = _split_scores(scores)
    _, far, frr = roc_points(tar, non)
    diff = far - frr
    # diff runs from >= 0 at the lowest threshold to -1 at +inf
    k = int(np.nonzero(diff <= 0)[0][0])
    if diff[k] == 0 or k == 0:
        return float(far[k])
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + lam * (far[k] - far[k - 1]))


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NormalizationError("cosine score of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def fuse_logits(runs: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Element-wise mean of per-utterance logits (or trial scores) across runs."""
    if not runs:
        raise AlignmentError("nothing to fuse")
    ref = runs[0]
    for i, run in enumerate(runs[1:], start=1):
        missing = [k for k in ref if k not in run]
        extra = [k for k in run if k not in ref]
        if missing or extra:
            first = missing[0] if missing else extra[0]
            where = f"run {i}" if missing else "run 0"
            raise AlignmentError(f"utterance {first!r} is missing from {where}")
    fused = {}
    for key in ref:
        stacked = [np.atleast_1d(np.asarray(run[key], dtype=np.float64)) for run in runs]
        if any(s.shape != stacked[0].shape for s in stacked):
            raise AlignmentError(f"utterance {key!r} has mismatched shapes {[s.shape for s in stacked]}")
        fused[key] = np.mean(stacked, axis=0)
    return fused


def epochs_to_plateau(log: Sequence[float], tolerance: float = 0.0, patience: int = 3,
                      mode: str = "max") -> int:
    """First 1-based epoch after which the metric improves on its best so far by
    less than ``tolerance`` for ``patience`` consecutive epochs; the last epoch
    if that never happens."""
    values = [float(v) for v in log]
    if not values:
        raise ParameterError("empty metric log")
    if mode not in ("max", "min"):
        raise ParameterError("mode must be 'max' or 'min'")
    sign = 1.0 if mode == "max" else -1.0
    vals = [sign * v for v in values]
    n = len(vals)
    for e in range(n - patience):
        best = max(vals[: e + 1])
        stalled = True
        for k in range(e + 1, e + 1 + patience):
            if vals[k] - best >= tolerance and vals[k] > best:
                stalled = False
                break
            best = max(best, vals[k])
        if stalled:
            return e + 1
    return n
