"""Deterministic checkpoint archive for encoder weights and run metadata.

Layout: an 8-byte magic, a little-endian u64 header length, a JSON header,
then the raw array bytes. The header lists arrays in sorted name order with
explicit dtype, shape, offset, and byte count; arrays are stored C-ordered
and little-endian. Writing the same arrays and metadata twice produces
byte-identical files (no timestamps, stable JSON key order), which makes
checkpoints safe to hash and diff.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"SGLCKPT1"


class CheckpointError(ValueError):
    """A checkpoint file is missing, truncated, or malformed."""


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict


def _to_le_array(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype == object:
        raise CheckpointError("object arrays cannot be checkpointed")
    le = arr.dtype.newbyteorder("<")
    return arr.astype(le, copy=False)


def save_checkpoint(
    path: str | Path, arrays: Mapping[str, np.ndarray | torch.Tensor], meta: dict
) -> None:
    """Write an archive atomically (temp file then rename)."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = _to_le_array(arrays[name])
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    header_len = int.from_bytes(data[len(MAGIC) : len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + header_len
    if header_end > len(data):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[len(MAGIC) + 8 : header_end].decode("utf-8"))
    body = data[header_end:]
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(
            body, dtype=np.dtype(entry["dtype"]), count=-1, offset=start
        )[: nbytes // np.dtype(entry["dtype"]).itemsize]
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(arrays=arrays, meta=header["meta"])


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Snapshot a module's state dict as numpy arrays."""
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def load_into_module(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    """Restore a snapshot produced by ``module_arrays``."""
    state = {name: torch.as_tensor(arr) for name, arr in arrays.items()}
    module.load_state_dict(state, strict=True)


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
