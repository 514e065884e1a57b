"""Checkpoint files: a JSON manifest plus a raw little-endian float32 blob.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
Arrays are stored back to back in manifest order.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = "GGKPT1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], state: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    tmp_bin = path / "weights.bin.tmp"
    with tmp_bin.open("wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=_DTYPE)
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "dtype": "f32", "offset": offset})
            offset += data.nbytes
    manifest = {"magic": MAGIC, "version": 1, "entries": entries, "state": state}
    tmp_json = path / "manifest.json.tmp"
    tmp_json.write_text(json.dumps(manifest, indent=1, sort_keys=False))
    os.replace(tmp_bin, path / "weights.bin")
    os.replace(tmp_json, path / "manifest.json")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except (OSError, ValueError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    if manifest.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC} checkpoint")
    arrays = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        if start + 4 * n > len(blob):
            raise CheckpointError(f"{path}: blob truncated at {e['name']}")
        arrays[e["name"]] = np.frombuffer(blob, _DTYPE, n, start).reshape(e["shape"]).astype(np.float32)
    return arrays, manifest["state"]
