"""Versioned, canonical checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic "CPCKPT01"
    u32       format version (currently 1)
    u64       header length H
    H bytes   UTF-8 JSON header, keys sorted, no whitespace
    payload   float64 LE arrays, back to back, in header order
    32 bytes  SHA-256 of everything above

The header records the task, head configuration, class labels, train
configuration, RNG state, optimizer step, metric log and, for each array,
its name, shape and byte offset within the payload. Identical contents
always serialise to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from corrpool.downstream import DownstreamModel
from corrpool.errors import CheckpointError, CorrPoolError
from corrpool.training import EpochRecord, TrainConfig, TrainState

MAGIC = b"CPCKPT01"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    model: DownstreamModel
    config: TrainConfig | None = None
    state: TrainState | None = None


def _pack_arrays(groups: dict[str, dict[str, np.ndarray]]):
    index, chunks, offset = [], [], 0
    for group in sorted(groups):
        for name in sorted(groups[group]):
            arr = np.ascontiguousarray(groups[group][name], dtype="<f8")
            raw = arr.tobytes()
            index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    return index, b"".join(chunks)


def to_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    params = model.parameters()
    groups = {"params": {k: p.data for k, p in params.items()}}
    header: dict = {
        "task": model.task,
        "head": model.config.to_dict(),
        "labels": model.labels,
        "num_layers": model.weights.num_layers,
        "trainable": {k: p.trainable for k, p in params.items()},
        "train_config": ckpt.config.to_dict() if ckpt.config is not None else None,
        "state": None,
    }
    if ckpt.state is not None:
        s = ckpt.state
        groups["optimizer"] = dict(s.optimizer_arrays)
        groups["best"] = dict(s.best_params)
        header["state"] = {
            "epoch": s.epoch,
            "rng_state": s.rng_state,
            "optimizer_step": s.optimizer_step,
            "log": [[r.epoch, r.train_loss, r.val_metric] for r in s.log],
            "best_metric": s.best_metric,
            "best_epoch": s.best_epoch,
            "epochs_since_best": s.epochs_since_best,
            "finished": s.finished,
        }
    index, payload = _pack_arrays(groups)
    header["arrays"] = index
    header["payload_bytes"] = len(payload)
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"checkpoint truncated: {len(raw)} bytes")
    magic, version, head_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint corrupt or truncated (checksum mismatch)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    payload = body[start + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("payload length does not match header")

    groups: dict[str, dict[str, np.ndarray]] = {}
    for item in header["arrays"]:
        count = int(np.prod(item["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=item["offset"])
        groups.setdefault(item["group"], {})[item["name"]] = arr.astype(np.float64).reshape(item["shape"])

    try:
        model = DownstreamModel.build(header["task"], header["head"], header["num_layers"], header["labels"], 0)
        model.load_arrays(groups.get("params", {}))
        for name, p in model.parameters().items():
            p.set_trainable(header["trainable"][name])
        config = TrainConfig.from_dict(header["train_config"]) if header["train_config"] else None
    except (CorrPoolError, KeyError, TypeError) as exc:
        raise CheckpointError(f"inconsistent checkpoint contents: {exc}") from exc

    state = None
    if header["state"] is not None:
        s = header["state"]
        state = TrainState(
            epoch=s["epoch"],
            rng_state=s["rng_state"],
            optimizer_step=s["optimizer_step"],
            optimizer_arrays=groups.get("optimizer", {}),
            log=[EpochRecord(int(e), float(l), float(v)) for e, l, v in s["log"]],
            best_metric=s["best_metric"],
            best_epoch=s["best_epoch"],
            best_params=groups.get("best", {}),
            epochs_since_best=s["epochs_since_best"],
            finished=s["finished"],
        )
    return Checkpoint(model, config, state)


def save_checkpoint(path, model: DownstreamModel, config: TrainConfig | None = None,
                    state: TrainState | None = None) -> None:
    data = to_bytes(Checkpoint(model, config, state))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
