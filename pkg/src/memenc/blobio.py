"""Flat little-endian float64 blob plus JSON manifest.

Used for checkpoints, the token cache and datasets.  ``<stem>.bin`` holds the
arrays back to back; ``<stem>.json`` maps each name to its element offset,
shape and frozen flag, alongside any caller metadata.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "memenc-blob-v1"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False)


def write_blob(stem: str | Path, arrays: Mapping[str, np.ndarray], frozen: Mapping[str, bool] | None = None,
               meta: Mapping[str, Any] | None = None) -> str:
    """Write ``arrays`` and return the sha256 of the manifest text."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name in arrays:
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries[name] = {
                "offset": offset,
                "shape": list(arr.shape),
                "frozen": bool(frozen.get(name, False)) if frozen else False,
            }
            offset += arr.size
    blob_hash = _file_sha256(stem.with_suffix(".bin"))
    manifest = {"format": FORMAT, "dtype": "float64", "byteorder": "little", "entries": entries,
                "blob_sha256": blob_hash, "meta": dict(meta or {})}
    text = canonical_json(manifest)
    stem.with_suffix(".json").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_blob(stem: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{stem}: unknown blob format {manifest.get('format')!r}")
    flat = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    arrays = {}
    for name, entry in manifest["entries"].items():
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[name] = flat[entry["offset"]: entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest


def manifest_hash(stem: str | Path) -> str:
    return hashlib.sha256(Path(stem).with_suffix(".json").read_bytes()).hexdigest()


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
