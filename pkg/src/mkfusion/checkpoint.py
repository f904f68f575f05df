"""Binary checkpoints: model parameters plus optional optimizer and RNG state.

Layout::

    bytes 0-7    magic b"SSACKPT1"
    bytes 8-15   u64 LE manifest length L
    bytes 16..   UTF-8 JSON manifest (L bytes)
    then         raw little-endian float32 blobs at the offsets listed in the manifest

The manifest lists each array as ``{"name", "shape", "offset"}`` with
offsets relative to the start of the blob region, and carries the model
config, the optimizer step counter, the training step and the sampler RNG
state.  Nothing is materialized until the whole file has been validated.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError
from .model import FusionModel, ModelConfig

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "MAGIC"]

MAGIC = b"SSACKPT1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    model: FusionModel
    moments: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer_step: int = 0
    train_step: int = 0
    rng_state: dict | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path, model: FusionModel, moments: dict[str, dict[str, np.ndarray]] | None = None,
                    optimizer_step: int = 0, train_step: int = 0, rng_state: dict | None = None,
                    extra: dict[str, Any] | None = None) -> None:
    """Write atomically (temp file + rename) so an interrupted save never clobbers a good file.

    ``moments`` maps a block name (e.g. ``"m"``, ``"v"``) to per-parameter arrays.
    """
    blocks: list[tuple[str, dict[str, np.ndarray]]] = [
        ("params", {k: t.data for k, t in model.parameters().items()})
    ]
    for block, arrays in (moments or {}).items():
        blocks.append((block, arrays))
    entries, chunks, offset = [], [], 0
    for block, arrays in blocks:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"block": block, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "arrays": entries,
        "data_bytes": offset,
        "optimizer_step": int(optimizer_step),
        "train_step": int(train_step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + _LEN.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}", offset=0)
    (mlen,) = _LEN.unpack_from(raw, 8)
    start = 16 + mlen
    if len(raw) < start:
        raise FormatError(f"{path}: manifest runs past end of file", offset=len(raw))
    try:
        manifest = json.loads(raw[16:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})", offset=16) from None
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}", offset=16)
    if len(raw) != start + manifest["data_bytes"]:
        raise FormatError(f"{path}: expected {start + manifest['data_bytes']} bytes, found {len(raw)}",
                          offset=min(len(raw), start + manifest["data_bytes"]))

    blocks: dict[str, dict[str, np.ndarray]] = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start + e["offset"])
        blocks.setdefault(e["block"], {})[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)

    model = FusionModel(ModelConfig(**manifest["model_config"]), rng=np.random.default_rng(0))
    params = model.parameters()
    stored = blocks.pop("params", {})
    if set(stored) != set(params):
        missing = sorted(set(params) ^ set(stored))
        raise FormatError(f"{path}: parameter set mismatch ({missing[:3]} ...)", offset=16)
    for name, t in params.items():
        if stored[name].shape != t.shape:
            raise FormatError(f"{path}: {name} has shape {stored[name].shape}, expected {t.shape}", offset=16)
    for name, t in params.items():
        t.data = stored[name]
    return Checkpoint(model, blocks, manifest["optimizer_step"], manifest["train_step"],
                      manifest["rng_state"], manifest["extra"])
