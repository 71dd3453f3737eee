"""On-disk formats.

StackFile (binary, little-endian)::

    offset 0   8 bytes  ASCII magic "CPSTACK1"
    offset 8   u32      number of layers (L+1)
    offset 12  u32      frames T
    offset 16  u32      channels D
    offset 20  f32[(L+1)*T*D]  layer-major, then frame-major, then channel

Manifest: one ``utt_id<TAB>stack_path<TAB>label`` record per line; relative
paths resolve against the manifest's directory.

Trial list: one ``label enroll_utt test_utt`` record per line, space
separated, label 1 for same speaker and 0 otherwise.

Score file: ``trial_id<TAB>score<TAB>label`` with label ``target`` or
``nontarget``. Classification runs use the same three columns, where the
score column holds comma-separated logits and the label is the class name;
such files start with a ``#classes<TAB>name,name,...`` line.

Metric log: ``epoch<TAB>train_loss<TAB>val_metric``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from corrpool.errors import FormatError
from corrpool.layerwise import LayerStack
from corrpool.metrics import NONTARGET, TARGET

STACK_MAGIC = b"CPSTACK1"
_HEADER = struct.Struct("<8sIII")
_MAX_U32 = 0xFFFFFFFF


def write_stack(path, stack) -> None:
    layers = stack.layers if isinstance(stack, LayerStack) else np.asarray(stack)
    if layers.ndim != 3 or min(layers.shape) < 1:
        raise FormatError(f"cannot write stack of shape {layers.shape}")
    if max(layers.shape) > _MAX_U32:
        raise FormatError(f"stack dimensions {layers.shape} overflow u32")
    header = _HEADER.pack(STACK_MAGIC, *layers.shape)
    payload = np.ascontiguousarray(layers, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_stack(path) -> LayerStack:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header", offset=len(raw))
    magic, n_layers, t, d = _HEADER.unpack_from(raw, 0)
    if magic != STACK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {STACK_MAGIC!r}", offset=0)
    if min(n_layers, t, d) == 0:
        raise FormatError(f"{path}: zero dimension in header ({n_layers}, {t}, {d})", offset=8)
    count = n_layers * t * d
    expected = _HEADER.size + 4 * count
    if expected > len(raw):
        raise FormatError(
            f"{path}: truncated payload, header needs {expected} bytes but file has {len(raw)}",
            offset=len(raw),
        )
    if expected < len(raw):
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload", offset=expected)
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    return LayerStack(data.astype(np.float64).reshape(n_layers, t, d))


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: Path
    label: str


def read_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}",
                                  offset=lineno)
            utt, stack_path, label = parts
            if utt in seen:
                raise FormatError(f"{path}:{lineno}: duplicate utt_id {utt!r} (first seen on line {seen[utt]})",
                                  offset=lineno)
            seen[utt] = lineno
            resolved = Path(stack_path)
            if not resolved.is_absolute():
                resolved = base / resolved
            if check_files and not resolved.exists():
                raise FormatError(f"{path}:{lineno}: stack file {str(resolved)!r} does not exist", offset=lineno)
            entries.append(ManifestEntry(utt, resolved, label))
    if not entries:
        raise FormatError(f"{path}: manifest is empty")
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            p = Path(e.path)
            try:
                p = Path(os.path.relpath(p, path.parent)) if p.is_absolute() else p
            except ValueError:
                pass
            fh.write(f"{e.utt_id}\t{p.as_posix()}\t{e.label}\n")


@dataclass(frozen=True)
class TrialPair:
    is_target: bool
    enroll: str
    test: str

    @property
    def trial_id(self) -> str:
        return f"{self.enroll}|{self.test}"


def read_trials(path, known_ids=None) -> list[TrialPair]:
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: expected 'label enroll test' with label 0 or 1", offset=lineno)
            pair = TrialPair(parts[0] == "1", parts[1], parts[2])
            if known_ids is not None:
                for utt in (pair.enroll, pair.test):
                    if utt not in known_ids:
                        raise FormatError(f"{path}:{lineno}: utterance {utt!r} not in the manifest", offset=lineno)
            trials.append(pair)
    if not trials:
        raise FormatError(f"{path}: trial list is empty")
    return trials


def write_trials(path, trials) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(f"{int(t.is_target)} {t.enroll} {t.test}\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_scores(path, rows) -> None:
    """``rows``: iterable of (trial_id, score, is_target)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trial_id, score, is_target in rows:
            fh.write(f"{trial_id}\t{_fmt(score)}\t{TARGET if is_target else NONTARGET}\n")


def write_logits(path, rows, classes) -> None:
    """``rows``: iterable of (utt_id, logits, label name)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#classes\t" + ",".join(classes) + "\n")
        for utt, logits, label in rows:
            fh.write(f"{utt}\t{','.join(_fmt(v) for v in logits)}\t{label}\n")


@dataclass
class ScoreFile:
    """Parsed score file: ``values`` maps id -> score vector, ``labels`` id -> label."""

    values: dict[str, np.ndarray]
    labels: dict[str, str]
    classes: list[str] | None

    @property
    def is_classification(self) -> bool:
        return self.classes is not None


def read_scores(path) -> ScoreFile:
    values: dict[str, np.ndarray] = {}
    labels: dict[str, str] = {}
    classes = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#classes\t"):
                classes = line.split("\t", 1)[1].split(",")
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields", offset=lineno)
            key, score, label = parts
            if key in values:
                raise FormatError(f"{path}:{lineno}: duplicate id {key!r}", offset=lineno)
            try:
                vec = np.array([float(v) for v in score.split(",")])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: unparsable score {score!r}", offset=lineno) from None
            if classes is None and label not in (TARGET, NONTARGET):
                raise FormatError(f"{path}:{lineno}: label must be target or nontarget", offset=lineno)
            values[key] = vec
            labels[key] = label
    return ScoreFile(values, labels, classes)


def write_metric_log(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.epoch}\t{_fmt(r.train_loss)}\t{_fmt(r.val_metric)}\n")


def read_metric_log(path) -> list[tuple[int, float, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected epoch, train_loss, val_metric", offset=lineno)
            out.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return out
