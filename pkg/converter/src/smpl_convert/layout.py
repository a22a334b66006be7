"""Writers for the neutral on-disk layouts.

Both output formats pair a canonical JSON manifest with flat binary data:
sorted keys, fixed separators, a trailing newline, and little-endian
32-bit arrays packed back to back in manifest order.  Writing is atomic
(temp file + rename) and contains no timestamps, so converting the same
input twice produces byte-identical trees.
"""

from __future__ import annotations

import json
import os
from typing import Iterable

import numpy as np

_DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}


def pack_fields(fields: Iterable[tuple[str, np.ndarray, str]]) -> tuple[bytes, list[dict]]:
    """Pack (name, array, dtype-code) triples into a blob + manifest entries.

    Args:
        fields: ordered (name, array, "f4"|"i4") triples.

    Returns:
        (blob bytes, manifest entry dicts with name/dtype/shape/offset/nbytes).
    """
    blob = bytearray()
    entries = []
    for name, arr, code in fields:
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": code,
            "shape": list(arr.shape),
            "offset": len(blob),
            "nbytes": len(raw),
        })
        blob.extend(raw)
    return bytes(blob), entries


def dump_json(obj) -> str:
    """Canonical JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": ")) + "\n"


def write_json(path: str, obj) -> None:
    _atomic_write(path, dump_json(obj).encode("utf-8"))


def write_blob(path: str, blob: bytes) -> None:
    _atomic_write(path, blob)


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
