"""Directory container: a JSON manifest plus one raw little-endian file per array.

Layout::

    <dir>/manifest.json
    <dir>/arrays/<index>.bin

The manifest lists every array with its name, shape, dtype, file, byte
length and sha256.  Readers verify lengths and checksums before returning
data, so a truncated or edited container is rejected.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import numpy as np

__all__ = ["SCHEMA_VERSION", "ContainerError", "write_container", "read_container", "read_manifest", "array_checksums"]

SCHEMA_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
    "uint8": "|u1",
    "bool": "|b1",
}


class ContainerError(ValueError):
    """Malformed, incomplete or tampered container."""


def _encode(arr: np.ndarray) -> tuple[str, bytes]:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    le = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[name]))
    return name, le.tobytes(order="C")


def write_container(path, arrays: dict[str, np.ndarray], metadata: dict | None = None, force: bool = False) -> dict:
    """Write ``arrays`` (name -> ndarray) and JSON-able ``metadata``; returns the manifest."""
    path = Path(path)
    if path.exists():
        if not force:
            raise FileExistsError(f"{path} exists (use force to overwrite)")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "arrays").mkdir(parents=True)
    index = []
    for i, name in enumerate(sorted(arrays)):
        dtype, raw = _encode(arrays[name])
        fname = f"arrays/{i:04d}.bin"
        (tmp / fname).write_bytes(raw)
        index.append({
            "name": name,
            "shape": [int(s) for s in np.shape(arrays[name])],
            "dtype": dtype,
            "file": fname,
            "offset": 0,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "byte_order": "little",
        "arrays": index,
        "metadata": metadata or {},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False)
    (tmp / "manifest.json").write_text(text + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise ContainerError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(mf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{mf}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ContainerError(f"{path}: unsupported schema version {manifest.get('schema_version')!r}")
    return manifest


def read_container(path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    """Arrays (native byte order) and metadata."""
    path = Path(path)
    manifest = read_manifest(path)
    out = {}
    for entry in manifest["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ContainerError(f"{entry['name']}: unknown dtype {dtype!r}")
        fp = path / entry["file"]
        if not fp.is_file():
            raise ContainerError(f"{entry['name']}: missing {entry['file']}")
        raw = fp.read_bytes()[entry.get("offset", 0):]
        dt = np.dtype(_DTYPES[dtype])
        shape = tuple(entry["shape"])
        expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(raw) != expect or entry["nbytes"] != expect:
            raise ContainerError(f"{entry['name']}: {len(raw)} bytes on disk, shape implies {expect}")
        if verify and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ContainerError(f"{entry['name']}: checksum mismatch")
        out[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out, manifest["metadata"]


def array_checksums(path) -> dict[str, str]:
    return {e["name"]: e["sha256"] for e in read_manifest(path)["arrays"]}
