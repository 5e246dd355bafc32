"""Checkpoint directories: ``manifest.json`` plus one raw little-endian buffer per parameter.

Layout::

    ckpt/
      manifest.json        {"format_version": 1, "config": {...},
                            "params": [{"name", "shape", "dtype", "file"}, ...]}
      params/<name>.bin    raw little-endian values, C order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], config: dict | None = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(state):
        arr = np.asarray(state[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for parameter {name}")
        fname = f"params/{name}.bin"
        (path / fname).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "file": fname})
    manifest = {"format_version": FORMAT_VERSION, "config": config or {}, "params": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    mfile = Path(path) / "manifest.json"
    if not mfile.is_file():
        raise CheckpointError(f"no manifest.json in {path}")
    manifest = json.loads(mfile.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(state, config)``."""
    path = Path(path)
    manifest = read_manifest(path)
    state = {}
    for entry in manifest["params"]:
        raw = (path / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
        expected = int(np.prod(entry["shape"], dtype=np.int64))
        if arr.size != expected:
            raise CheckpointError(f"{entry['name']}: {arr.size} values on disk, shape {entry['shape']} expects {expected}")
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return state, manifest["config"]
