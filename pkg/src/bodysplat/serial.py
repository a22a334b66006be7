"""Manifest + binary-blob serialization shared by the on-disk formats.

Every persistent artifact in this package is a small JSON manifest next to a
raw little-endian binary file.  The manifest lists each array field with its
dtype, shape, and byte offset; the blob is the fields packed back to back in
manifest order, row-major.  Keeping the writer byte-stable (sorted keys, fixed
separators, no timestamps) makes same-seed runs byte-identical on disk.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Iterable, Mapping

import numpy as np

_DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}


def pack_fields(fields: Iterable[tuple[str, np.ndarray, str]]) -> tuple[bytes, list[dict]]:
    """Pack (name, array, dtype-code) triples into a blob + manifest entries."""
    blob = bytearray()
    entries = []
    for name, arr, code in fields:
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "offset": len(blob),
                "nbytes": len(raw),
            }
        )
        blob.extend(raw)
    return bytes(blob), entries


def unpack_field(blob: bytes, entry: Mapping) -> np.ndarray:
    """Read one manifest entry out of the blob as float64/int64 working arrays."""
    dt = _DTYPES[entry["dtype"]]
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    expect = count * dt.itemsize
    if entry["nbytes"] != expect:
        raise ValueError(f"field {entry['name']!r}: manifest says {entry['nbytes']} bytes, "
                         f"shape needs {expect}")
    off = entry["offset"]
    if off < 0 or off + expect > len(blob):
        raise ValueError(f"field {entry['name']!r}: offset/length outside blob")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.astype(np.int64 if entry["dtype"] == "i4" else np.float64)


def unpack_fields(blob: bytes, entries: Iterable[Mapping]) -> dict[str, np.ndarray]:
    return {e["name"]: unpack_field(blob, e) for e in entries}


def dump_json(obj) -> str:
    """Canonical JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": ")) + "\n"


def write_json(path: str, obj) -> None:
    _atomic_write(path, dump_json(obj).encode("utf-8"))


def read_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_blob(path: str, blob: bytes) -> None:
    _atomic_write(path, blob)


def read_blob(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
