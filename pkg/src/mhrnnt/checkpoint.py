"""Versioned checkpoint files.

Layout::

    MHRNNT-CHECKPOINT\\n
    {json manifest: format_version, config, segments, n_values, sha256, metadata}\\n
    <n_values little-endian float64>

Each segment entry names a parameter group with its shape, offset and
length (in values, not bytes) into the payload.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import CheckpointVersionMismatch, CorruptCheckpoint, TruncatedCheckpoint
from .model import ModelConfig, TransducerModel

MAGIC = b"MHRNNT-CHECKPOINT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: TransducerModel
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def manifest(model: TransducerModel, metadata: Optional[dict] = None) -> dict:
    segments = []
    offset = 0
    for name, value in model.params.items():
        segments.append({"name": name, "shape": list(value.shape), "offset": offset, "length": int(value.size)})
        offset += value.size
    payload = model.flat().astype("<f8").tobytes()
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "segments": segments,
        "n_values": offset,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "metadata": metadata or {},
    }


def save_checkpoint(model: TransducerModel, path, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(manifest(model, metadata), sort_keys=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode() + b"\n")
        f.write(model.flat().astype("<f8").tobytes())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        if MAGIC.startswith(data):
            raise TruncatedCheckpoint(f"{path}: file ends inside the magic line")
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise TruncatedCheckpoint(f"{path}: file ends inside the manifest")
    try:
        head = json.loads(data[len(MAGIC):end])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable manifest ({exc})") from None
    version = head.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    payload = data[end + 1:]
    try:
        expected = 8 * int(head["n_values"])
        config = ModelConfig(**head["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: bad manifest ({exc})") from None
    if len(payload) < expected:
        raise TruncatedCheckpoint(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise CorruptCheckpoint(f"{path}: {len(payload) - expected} trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != head.get("sha256"):
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch")
    shapes = config.param_shapes()
    if [s["name"] for s in head["segments"]] != list(shapes):
        raise CorruptCheckpoint(f"{path}: segment names do not match the config")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    try:
        model = TransducerModel.from_flat(config, flat)
    except ValueError as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
    return Checkpoint(model, head.get("metadata", {}))


def load_checkpoint(path) -> TransducerModel:
    return read_checkpoint(path).model
