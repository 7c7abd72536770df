"""Portable checkpoint files.

Layout::

    magic (8 bytes) | version (u32 LE) | sha256 of body (32 bytes) | body
    body = meta length (u64 LE) | meta JSON (canonical) | tensor payloads

The meta JSON carries the config snapshot, counters, rng state and a tensor
index (name, group, dtype, shape, offset, nbytes); payloads are raw
little-endian arrays in index order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MTECGCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sI32s")
_GROUPS = ("param", "m", "v")


class CheckpointError(ValueError):
    """Corrupted, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, torch.Tensor]
    moments: dict[str, dict[str, torch.Tensor]] = field(default_factory=lambda: {"m": {}, "v": {}})
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _to_le(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def dumps(ckpt: Checkpoint) -> bytes:
    tensors = {"param": ckpt.params, "m": ckpt.moments.get("m", {}), "v": ckpt.moments.get("v", {})}
    index, payloads, offset = [], [], 0
    for group in _GROUPS:
        for name in sorted(tensors[group]):
            arr = _to_le(tensors[group][name])
            raw = arr.tobytes()
            index.append(
                {"group": group, "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            payloads.append(raw)
            offset += len(raw)
    meta = _canonical(
        {
            "config": ckpt.config,
            "step": ckpt.step,
            "rng_state": ckpt.rng_state,
            "extra": ckpt.extra,
            "tensors": index,
        }
    )
    body = struct.pack("<Q", len(meta)) + meta + b"".join(payloads)
    return _PREFIX.pack(MAGIC, VERSION, hashlib.sha256(body).digest()) + body


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size + 8:
        raise CheckpointError("checkpoint truncated: header incomplete")
    magic, version, digest = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    body = blob[_PREFIX.size :]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint corrupted: checksum mismatch")
    (meta_len,) = struct.unpack_from("<Q", body)
    meta = json.loads(body[8 : 8 + meta_len])
    payload = body[8 + meta_len :]

    groups: dict[str, dict] = {g: {} for g in _GROUPS}
    for entry in meta["tensors"]:
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"checkpoint truncated inside tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    return Checkpoint(
        config=meta["config"],
        params=groups["param"],
        moments={"m": groups["m"], "v": groups["v"]},
        step=meta["step"],
        rng_state=meta["rng_state"],
        extra=meta["extra"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return loads(path.read_bytes())
