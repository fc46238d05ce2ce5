"""Single-file checkpoints: version byte, JSON manifest, raw float64 payload.

Layout::

    byte 0          format version
    bytes 1..8      manifest length n, unsigned little-endian
    bytes 9..9+n    UTF-8 JSON manifest
    rest            every array's data as little-endian float64, row-major,
                    in manifest order
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = []
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(np.shape(arr))})
    manifest = {"arrays": entries, "meta": dict(meta or {})}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise CheckpointError(f"{path}: empty file")
    if raw[0] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {raw[0]}")
    (n,) = struct.unpack_from("<Q", raw, 1)
    manifest = json.loads(raw[9:9 + n].decode("utf-8"))
    offset = 9 + n
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, manifest["meta"]
