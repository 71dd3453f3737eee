"""Synthetic layer stacks that plant class information in a chosen statistic.

Regimes:

* ``mean_coded``: frames ~ N(mu_c, I) with mu_c = separation * N(0, I).
* ``correlation_coded``: frames = A_c z with z ~ N(0, I). A_c has unit-norm
  rows built from a shared random matrix plus ``separation`` times a
  class-specific one, so every class has zero channel means and unit channel
  variances; only cross-channel correlations A_c A_c^T differ.
* ``layer_coded``: one layer (``signal_layer``) carries both a class mean and
  a class correlation structure. Every other layer is nuisance: each
  utterance draws its own random mean and mixing matrix, independently of
  the class.
* ``mixed``: the first half of the classes are mean_coded, the rest
  correlation_coded.

Without ``signal_layer`` every layer carries the class signal: layer l of an
utterance is ``mu_c + A_c (sqrt(1 - b) z_t + sqrt(b) e_{l,t})`` with a latent
``z`` shared across layers and ``b = layer_noise``, which keeps the per-layer
moments exact. Setting ``signal_layer`` for any regime confines the signal
to that layer and turns the others into nuisance layers.

For the ``sv`` task the class identities are speakers. Training speakers
are disjoint from the dev and test speakers, and each trial list holds
every target pair of its split plus an equal number of non-target pairs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from corrpool.core.rng import SeededRng
from corrpool.errors import SpecError
from corrpool.formats import ManifestEntry, TrialPair, write_manifest, write_stack, write_trials

REGIMES = ("mean_coded", "correlation_coded", "layer_coded", "mixed")


@dataclass(frozen=True)
class SynthSpec:
    regime: str = "correlation_coded"
    num_classes: int = 4
    utterances_per_class: int = 50
    t_min: int = 80
    t_max: int = 120
    dim: int = 16
    num_layers: int = 4
    seed: int = 0
    separation: float = 1.0
    task: str = "sid"
    signal_layer: int | None = None
    layer_noise: float = 0.5
    # AR(1) coefficient of the latent frames over time; per-frame marginals are unchanged
    temporal_correlation: float = 0.0
    # SID: per-class fractions for train / dev / test
    splits: tuple = (0.75, 0.125, 0.125)
    # SV: number of held-out speakers in each of dev and test
    eval_speakers: int = 8

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(float(s) for s in self.splits))
        if self.regime not in REGIMES:
            raise SpecError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.task not in ("sid", "er", "sv"):
            raise SpecError(f"task must be sid, er or sv, got {self.task!r}")
        if self.num_classes < 2 or self.utterances_per_class < 1:
            raise SpecError("need at least 2 classes and 1 utterance per class")
        if self.dim < 1 or self.num_layers < 1:
            raise SpecError("dim and num_layers must be positive")
        if self.regime != "mean_coded" and self.dim < 2:
            raise SpecError(f"regime {self.regime} needs dim >= 2 to carry correlations")
        if not 2 <= self.t_min <= self.t_max:
            raise SpecError(f"need 2 <= t_min <= t_max, got [{self.t_min}, {self.t_max}]")
        if self.separation < 0:
            raise SpecError("separation must be non-negative")
        if not 0.0 <= self.layer_noise <= 1.0:
            raise SpecError("layer_noise must lie in [0, 1]")
        if not 0.0 <= self.temporal_correlation < 1.0:
            raise SpecError("temporal_correlation must lie in [0, 1)")
        layer = self.signal_layer
        if self.regime == "layer_coded" and layer is None:
            object.__setattr__(self, "signal_layer", min(2, self.num_layers - 1))
        if self.signal_layer is not None and not 0 <= self.signal_layer < self.num_layers:
            raise SpecError(f"signal_layer {self.signal_layer} outside [0, {self.num_layers})")
        if self.signal_layer is not None and self.num_layers < 2:
            raise SpecError("a signal layer needs at least one other layer")
        if self.task != "sv":
            if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1) > 1e-9:
                raise SpecError("splits must be three non-negative fractions summing to 1")
        elif self.eval_speakers < 2 or self.utterances_per_class < 2:
            raise SpecError("SV needs at least 2 eval speakers and 2 utterances per speaker")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["splits"] = list(self.splits)
        return out


@dataclass
class ClassModel:
    name: str
    mean: np.ndarray
    mixing: np.ndarray

    @property
    def correlation(self) -> np.ndarray:
        return self.mixing @ self.mixing.T


@dataclass
class Utterance:
    utt_id: str
    label: str
    split: str
    layers: np.ndarray


@dataclass
class SynthDataset:
    spec: SynthSpec
    classes: list[ClassModel]
    utterances: list[Utterance]
    trials: dict[str, list[TrialPair]] = field(default_factory=dict)

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _class_kind(spec: SynthSpec, index: int) -> str:
    if spec.regime == "mixed":
        return "mean_coded" if index < (spec.num_classes + 1) // 2 else "correlation_coded"
    return spec.regime


def _make_class(spec: SynthSpec, name: str, kind: str, shared: np.ndarray, gen: np.random.Generator) -> ClassModel:
    d = spec.dim
    s = spec.separation
    mean = np.zeros(d)
    mixing = np.eye(d)
    if kind in ("mean_coded", "layer_coded"):
        mean = s * gen.standard_normal(d)
    if kind in ("correlation_coded", "layer_coded"):
        mixing = _unit_rows(shared + s * gen.standard_normal((d, d)))
    return ClassModel(name, mean, mixing)


def _latent(spec: SynthSpec, gen: np.random.Generator, t: int) -> np.ndarray:
    """Standard-normal frames, optionally AR(1)-correlated over time."""
    eps = gen.standard_normal((t, spec.dim))
    rho = spec.temporal_correlation
    if rho == 0.0:
        return eps
    z = np.empty_like(eps)
    z[0] = eps[0]
    innov = np.sqrt(1.0 - rho * rho)
    for i in range(1, t):
        z[i] = rho * z[i - 1] + innov * eps[i]
    return z


def _nuisance(spec: SynthSpec, shared: np.ndarray, gen: np.random.Generator, t: int) -> np.ndarray:
    d = spec.dim
    mean = spec.separation * gen.standard_normal(d)
    mixing = _unit_rows(shared + spec.separation * gen.standard_normal((d, d)))
    return mean + _latent(spec, gen, t) @ mixing.T


def _utterance(spec: SynthSpec, cls: ClassModel, shared: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    t = int(gen.integers(spec.t_min, spec.t_max + 1))
    layers = np.empty((spec.num_layers, t, spec.dim))
    z = _latent(spec, gen, t)
    if spec.signal_layer is None:
        a = np.sqrt(1.0 - spec.layer_noise)
        b = np.sqrt(spec.layer_noise)
        for l in range(spec.num_layers):
            latent = a * z + b * _latent(spec, gen, t)
            layers[l] = cls.mean + latent @ cls.mixing.T
    else:
        for l in range(spec.num_layers):
            if l == spec.signal_layer:
                layers[l] = cls.mean + z @ cls.mixing.T
            else:
                layers[l] = _nuisance(spec, shared, gen, t)
    return layers


def _sid_split(spec: SynthSpec, n: int, gen: np.random.Generator) -> list[str]:
    n_train = int(round(spec.splits[0] * n))
    n_dev = int(round(spec.splits[1] * n))
    names = ["train"] * n_train + ["dev"] * n_dev + ["test"] * (n - n_train - n_dev)
    order = gen.permutation(n)
    return [names[i] for i in order]


def _trials(utts: list[Utterance], gen: np.random.Generator) -> list[TrialPair]:
    targets, nontargets = [], []
    for i in range(len(utts)):
        for j in range(i + 1, len(utts)):
            pair = TrialPair(utts[i].label == utts[j].label, utts[i].utt_id, utts[j].utt_id)
            (targets if pair.is_target else nontargets).append(pair)
    n = min(len(targets), len(nontargets))
    pick_t = sorted(gen.choice(len(targets), size=n, replace=False)) if n < len(targets) else range(n)
    pick_n = sorted(gen.choice(len(nontargets), size=n, replace=False))
    out = [targets[i] for i in pick_t] + [nontargets[i] for i in pick_n]
    return [out[i] for i in gen.permutation(len(out))]


def sample_dataset(spec: SynthSpec) -> SynthDataset:
    """Draw the whole dataset in memory; deterministic in ``spec.seed``."""
    gen = SeededRng(spec.seed).numpy_generator()
    shared = gen.standard_normal((spec.dim, spec.dim))
    prefix = "spk" if spec.task == "sv" else "class"
    n_classes = spec.num_classes + (2 * spec.eval_speakers if spec.task == "sv" else 0)
    classes = []
    for c in range(n_classes):
        kind = "layer_coded" if spec.regime == "layer_coded" else _class_kind(spec, c % spec.num_classes)
        classes.append(_make_class(spec, f"{prefix}{c:03d}", kind, shared, gen))

    utterances = []
    for c, cls in enumerate(classes):
        if spec.task == "sv":
            split = "train" if c < spec.num_classes else ("dev" if c < spec.num_classes + spec.eval_speakers else "test")
            splits = [split] * spec.utterances_per_class
        else:
            splits = _sid_split(spec, spec.utterances_per_class, gen)
        for i in range(spec.utterances_per_class):
            layers = _utterance(spec, cls, shared, gen)
            utterances.append(Utterance(f"{cls.name}_u{i:04d}", cls.name, splits[i], layers))

    data = SynthDataset(spec, classes, utterances)
    if spec.task == "sv":
        for split in ("dev", "test"):
            data.trials[split] = _trials(data.split(split), gen)
    return data


def write_dataset(data: SynthDataset, out_dir) -> dict[str, Path]:
    """Write stacks, manifests (train/dev/test.tsv), trial lists and spec.json."""
    out = Path(out_dir)
    (out / "stacks").mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    by_split: dict[str, list[ManifestEntry]] = {"train": [], "dev": [], "test": []}
    for u in data.utterances:
        rel = Path("stacks") / f"{u.utt_id}.stack"
        write_stack(out / rel, u.layers)
        by_split[u.split].append(ManifestEntry(u.utt_id, rel, u.label))
    for split, entries in by_split.items():
        if entries:
            paths[split] = out / f"{split}.tsv"
            write_manifest(paths[split], entries)
    for split, trials in data.trials.items():
        paths[f"{split}_trials"] = out / f"{split}_trials.txt"
        write_trials(paths[f"{split}_trials"], trials)
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(data.spec.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    paths["spec"] = spec_path
    return paths


def generate_synthetic(spec: SynthSpec, out_dir) -> dict[str, Path]:
    return write_dataset(sample_dataset(spec), out_dir)
