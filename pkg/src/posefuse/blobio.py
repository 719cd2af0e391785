"""Raw-array container: a manifest.json plus one float32 blob per array.

The same container backs feature fixtures, gallery feature caches, and
checkpoint parameter/optimizer stores. Blobs are C-contiguous
little-endian float32, exactly prod(shape)*4 bytes, so round trips are
bitwise exact.
"""

from __future__ import annotations

import json
import os
import re

import numpy as np

from .errors import ManifestError, MissingBlobError, ShapeMismatchError

BLOB_DTYPE = "f32le"
_NAME_SANITIZER = re.compile(r"[^A-Za-z0-9_.-]+")


def _blob_filename(index: int, name: str) -> str:
    safe = _NAME_SANITIZER.sub("_", name) or "blob"
    return f"{index:04d}__{safe}.f32"


def write_json(path: str, payload: dict) -> None:
    """Write JSON with a stable key order so identical payloads are byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str) -> dict:
    if not os.path.isfile(path):
        raise ManifestError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable manifest {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ManifestError(f"manifest {path} is not a JSON object")
    return payload


def save_arrays(dirpath: str, meta: dict, arrays: list[tuple[str, np.ndarray]],
                manifest_name: str = "manifest.json") -> dict:
    """Write named float32 arrays plus a manifest; returns the manifest dict.

    Arrays must already be float32: the container stores exactly f32le
    bytes and silent casts would break bitwise round trips.
    """
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for index, (name, arr) in enumerate(arrays):
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ShapeMismatchError(
                f"blob '{name}' must be float32, got {arr.dtype}")
        filename = _blob_filename(index, name)
        blob = np.ascontiguousarray(arr, dtype="<f4")
        with open(os.path.join(dirpath, filename), "wb") as fh:
            fh.write(blob.tobytes())
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": BLOB_DTYPE,
            "file": filename,
        })
    manifest = dict(meta)
    manifest["layers"] = entries
    write_json(os.path.join(dirpath, manifest_name), manifest)
    return manifest


def load_arrays(dirpath: str, manifest_name: str = "manifest.json"
                ) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    """Read a container back; validates every entry before touching data."""
    manifest = read_json(os.path.join(dirpath, manifest_name))
    entries = manifest.get("layers")
    if not isinstance(entries, list):
        raise ManifestError(f"manifest in {dirpath} has no 'layers' list")
    out = []
    for entry in entries:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            dtype = entry["dtype"]
            filename = entry["file"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed layer entry in {dirpath}: {entry!r}") from exc
        if dtype != BLOB_DTYPE:
            raise ShapeMismatchError(
                f"blob '{name}' in {dirpath} declares dtype {dtype!r}, expected {BLOB_DTYPE!r}")
        path = os.path.join(dirpath, filename)
        if not os.path.isfile(path):
            raise MissingBlobError(f"missing blob file for layer '{name}': {path}")
        expected = int(np.prod(shape)) * 4 if shape else 4
        actual = os.path.getsize(path)
        if actual != expected:
            raise ShapeMismatchError(
                f"blob '{name}' in {dirpath}: file holds {actual} bytes, "
                f"shape {shape} needs {expected}")
        data = np.fromfile(path, dtype="<f4").reshape(shape)
        out.append((name, data.astype(np.float32, copy=False)))
    return manifest, out


def load_array_map(dirpath: str, manifest_name: str = "manifest.json"
                   ) -> tuple[dict, dict[str, np.ndarray]]:
    manifest, pairs = load_arrays(dirpath, manifest_name)
    return manifest, dict(pairs)
