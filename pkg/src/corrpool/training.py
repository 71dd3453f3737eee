"""Deterministic mini-batch training and per-epoch validation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from corrpool.core.rng import SeededRng
from corrpool.core.tensor import backward, no_grad
from corrpool.downstream import TASKS, DownstreamModel
from corrpool.errors import NonFiniteError, ParameterError, TrainingError
from corrpool.formats import ManifestEntry, TrialPair, read_stack
from corrpool.layerwise import LayerStack
from corrpool.metrics import Trial, accuracy, cosine_score, eer
from corrpool.pooling import PoolingMethod

log = logging.getLogger(__name__)

# batch order and dropout masks come from a stream distinct from initialisation
_TRAIN_STREAM = 0x5DEECE66D


def training_rng(seed: int) -> SeededRng:
    return SeededRng(int(seed) ^ _TRAIN_STREAM)


@dataclass
class TrainConfig:
    task: str = "sid"
    pooling: str = "mean"
    seed: int = 0
    batch_size: int = 16
    epochs: int = 20
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    dropout: float = 0.0
    # stop after this many epochs without improvement; None disables
    patience: int | None = None
    freeze_layer_weights: bool = False
    # extra SidConfig / SvConfig fields (proj_dim, kernels, ...)
    head: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ParameterError(f"task must be one of {TASKS}, got {self.task!r}")
        self.pooling = PoolingMethod.parse(self.pooling).value
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be positive")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be non-negative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ParameterError(f"dropout must lie in [0, 1], got {self.dropout}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.patience is not None and self.patience < 1:
            raise ParameterError("patience must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    def head_config(self, input_dim: int) -> dict:
        cfg = {"input_dim": input_dim, "pooling": self.pooling, "dropout": self.dropout}
        cfg.update(self.head)
        return cfg

    @property
    def higher_is_better(self) -> bool:
        return self.task != "sv"


class Adam:
    """Adam with bias correction; constant step size."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if not p.trainable:
                continue
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * p.grad
            v = b2 * v + (1 - b2) * p.grad**2
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}


class Sgd:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.t = 0

    def step(self, params) -> None:
        self.t += 1
        for p in params.values():
            if p.trainable:
                p.data = p.data - self.lr * p.grad

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, t: int, arrays) -> None:
        self.t = int(t)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(config.learning_rate)
    return Adam(config.learning_rate)


@dataclass(frozen=True)
class Example:
    utt_id: str
    stack: LayerStack
    label: int


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainState:
    """Everything beyond the model parameters needed to resume bitwise."""

    epoch: int = 0
    rng_state: int = 0
    optimizer_step: int = 0
    optimizer_arrays: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    best_metric: float | None = None
    best_epoch: int = 0
    best_params: dict = field(default_factory=dict)
    epochs_since_best: int = 0
    finished: bool = False


@dataclass
class TrainResult:
    model: DownstreamModel
    log: list
    state: TrainState
    best_epoch: int


def load_examples(entries: Sequence[ManifestEntry], labels: Sequence[str]) -> list[Example]:
    index = {name: i for i, name in enumerate(labels)}
    out = []
    for e in entries:
        if e.label not in index:
            raise ParameterError(f"utterance {e.utt_id!r} has label {e.label!r} unknown to the model")
        out.append(Example(e.utt_id, read_stack(e.path), index[e.label]))
    return out


def infer_labels(entries: Sequence[ManifestEntry]) -> list[str]:
    return sorted({e.label for e in entries})


def predict_logits(model: DownstreamModel, examples: Sequence[Example]) -> np.ndarray:
    with no_grad():
        return np.stack([model.forward(ex.stack).data for ex in examples])


def embed(model: DownstreamModel, examples: Sequence[Example]) -> dict[str, np.ndarray]:
    with no_grad():
        return {ex.utt_id: model.forward(ex.stack).data.copy() for ex in examples}


def score_trials(embeddings: dict[str, np.ndarray], trials: Sequence[TrialPair]) -> list[tuple[str, float, bool]]:
    return [(t.trial_id, cosine_score(embeddings[t.enroll], embeddings[t.test]), t.is_target) for t in trials]


def evaluate_model(model: DownstreamModel, examples: Sequence[Example], trials: Sequence[TrialPair] | None = None) -> float:
    """Accuracy for SID/ER; EER of cosine-scored trials for SV."""
    if model.task == "sv":
        if not trials:
            raise ParameterError("SV evaluation needs a trial list")
        rows = score_trials(embed(model, examples), trials)
        return eer([Trial(i, s, t) for i, s, t in rows])
    logits = predict_logits(model, examples)
    return accuracy(logits, [ex.label for ex in examples])


def _is_better(metric: float, best: float | None, higher: bool) -> bool:
    if best is None:
        return True
    return metric > best if higher else metric < best


def train(
    model: DownstreamModel,
    train_set: Sequence[Example],
    config: TrainConfig,
    val_set: Sequence[Example] | None = None,
    val_trials: Sequence[TrialPair] | None = None,
    resume: TrainState | None = None,
    stop_after_epoch: int | None = None,
    on_epoch: Callable[[DownstreamModel, TrainState, TrainConfig], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place and return it with the best-validation parameters loaded.

    Without ``val_set`` the validation metric is computed on ``train_set``.
    ``stop_after_epoch`` interrupts the run (for resume tests); ``on_epoch``
    is called after every epoch, e.g. to write checkpoints.
    """
    if not train_set:
        raise TrainingError("training manifest is empty")
    if model.task != config.task and {model.task, config.task} != {"sid", "er"}:
        raise TrainingError(f"model task {model.task!r} does not match config task {config.task!r}")
    if model.task == "sv" and val_trials is None:
        raise TrainingError("SV training needs validation trials")
    val_set = val_set if val_set is not None else train_set
    params = model.parameters()
    if config.freeze_layer_weights:
        model.weights.logits.set_trainable(False)

    optimizer = make_optimizer(config)
    state = resume if resume is not None else TrainState(rng_state=training_rng(config.seed).get_state())
    if resume is not None:
        optimizer.load_state(state.optimizer_step, state.optimizer_arrays)
    rng = training_rng(config.seed)
    rng.set_state(state.rng_state)
    higher = config.higher_is_better

    while state.epoch < config.epochs and not state.finished:
        epoch = state.epoch + 1
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), config.batch_size), start=1):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            model.zero_grad()
            for ex in batch:
                try:
                    loss = model.loss(ex.stack, ex.label, training=True, rng=rng)
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite loss on {ex.utt_id!r}: {exc}", epoch, step) from exc
                backward(loss)
                total += float(loss.data)
                count += 1
            for p in params.values():
                if p.trainable:
                    p.grad = p.grad / len(batch)
            optimizer.step(params)
            for name, p in params.items():
                if not np.isfinite(p.data).all():
                    raise TrainingError(f"parameter {name} became non-finite", epoch, step)

        metric = evaluate_model(model, val_set, val_trials)
        record = EpochRecord(epoch, total / count, metric)
        state.log.append(record)
        state.epoch = epoch
        if _is_better(metric, state.best_metric, higher):
            state.best_metric = metric
            state.best_epoch = epoch
            state.best_params = model.state_arrays()
            state.epochs_since_best = 0
        else:
            state.epochs_since_best += 1
            if config.patience is not None and state.epochs_since_best >= config.patience:
                state.finished = True
        state.rng_state = rng.get_state()
        state.optimizer_step = optimizer.t
        state.optimizer_arrays = {k: v.copy() for k, v in optimizer.state_arrays().items()}
        log.info("epoch %d train_loss %.6f val_metric %.6f", epoch, record.train_loss, metric)
        if on_epoch is not None:
            on_epoch(model, state, config)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    if state.epoch >= config.epochs:
        state.finished = True
    best = DownstreamModel.build(model.task, model.config.to_dict(), model.weights.num_layers, model.labels,
                                 config.seed)
    best.load_arrays(state.best_params)
    best.weights.logits.set_trainable(model.weights.trainable)
    return TrainResult(best, list(state.log), state, state.best_epoch)
