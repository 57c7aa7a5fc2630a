"""Manifest-plus-blobs bundle format used for checkpoints, centroids and datasets.

A bundle is a directory holding ``manifest.json`` and one raw little-endian
binary file per array.  The manifest lists each array's name, shape, dtype and
file.  Writes go to a sibling temporary directory that is renamed into place.
"""

from __future__ import annotations

import json
import os
import shutil
from pathlib import Path

import numpy as np

from .errors import FormatError

MANIFEST = "manifest.json"
FORMAT_NAME = "gmvae-osr-bundle"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _dtype_tag(a: np.ndarray) -> str:
    return "<i8" if np.issubdtype(a.dtype, np.integer) else "<f8"


def dumps_json(obj) -> str:
    """Deterministic JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_bundle(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict,
                kind: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    entries = []
    for i, (name, arr) in enumerate(arrays.items()):
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        fname = f"{i:04d}.bin"
        (tmp / fname).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "file": fname})
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": kind,
                "meta": meta, "arrays": entries}
    (tmp / MANIFEST).write_text(dumps_json(manifest))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_bundle(path: str | os.PathLike, kind: str | None = None):
    """Return ``(arrays, meta, kind)``; raises :class:`FormatError` on any inconsistency."""
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no bundle manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{mpath} is not a {FORMAT_NAME} manifest")
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} bundle, found {manifest.get('kind')!r}")
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"unsupported dtype {entry['dtype']!r}")
        raw = (path / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != expected:
            raise FormatError(f"array {entry['name']!r}: {len(raw)} bytes, expected {expected}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, manifest.get("meta", {}), manifest.get("kind")
