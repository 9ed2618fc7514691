"""Checkpoint directories: ``manifest.json`` plus one raw little-endian
float64 file per named tensor."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "CheckpointError"]


class CheckpointError(ValueError):
    pass


def save_checkpoint(directory, tensors: dict, meta: dict | None = None) -> Path:
    """Write ``tensors`` (name -> array) and ``meta`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        fname = f"{name}.f64"
        (directory / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": "<f8", "bytes": arr.nbytes})
    manifest = {"format_version": FORMAT_VERSION, **(meta or {}), "tensors": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Return ``(tensors, manifest)``; sizes are checked against the manifest."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {directory}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {manifest.get('format_version')!r}")
    tensors = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        raw = (directory / e["file"]).read_bytes()
        if e["bytes"] != expected or len(raw) != expected:
            raise CheckpointError(f"{e['name']}: {len(raw)} bytes on disk, expected {expected}")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return tensors, manifest
