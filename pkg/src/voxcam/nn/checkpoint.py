"""VXC1 checkpoints.

Layout: magic ``VXC1``, uint32 format version, uint32 JSON length, UTF-8
JSON header, then the arrays listed in the header as little-endian float32,
concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams
from .optim import AdamState

MAGIC = b"VXC1"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model: ModelParams, adam: AdamState | None = None, meta: dict | None = None) -> bytes:
    groups = [("param", model.params), ("buffer", model.buffers)]
    if adam is not None:
        groups += [("adam_m", adam.m), ("adam_v", adam.v)]
    entries, blobs = [], []
    for group, arrays in groups:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f4")
            entries.append({"group": group, "name": name, "shape": list(arr.shape)})
            blobs.append(arr.tobytes(order="C"))
    header = {
        "config": model.config.to_dict(),
        "arrays": entries,
        "adam_step": adam.step if adam is not None else None,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)


def decode_checkpoint(raw: bytes):
    """Returns ``(ModelParams, AdamState | None, meta)``."""
    if len(raw) < _PREFIX.size:
        raise CheckpointError("checkpoint too short")
    magic, version, n = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + n])
    pos = _PREFIX.size + n
    groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = pos + 4 * count
        if end > len(raw):
            raise CheckpointError("checkpoint payload truncated")
        arr = np.frombuffer(raw[pos:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
        groups[e["group"]][e["name"]] = arr
        pos = end
    if pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    model = ModelParams(ModelConfig.from_dict(header["config"]), groups["param"], groups["buffer"])
    adam = None
    if header["adam_step"] is not None:
        adam = AdamState(groups["adam_m"], groups["adam_v"], header["adam_step"])
    return model, adam, header["meta"]


def save_checkpoint(path, model: ModelParams, adam: AdamState | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, adam, meta))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
