"""Named-tensor container.

Layout: 8-byte magic ``QLTENSOR``, little-endian uint32 header length, a UTF-8
JSON header ``{"version", "precision", "tensors": [{"name", "shape"}...],
"meta"}``, then each tensor's data as flat little-endian scalars in header
order.  Writing what was read reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"QLTENSOR"
FORMAT_VERSION = 1
_LE = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], precision: str = "float32", meta: dict | None = None) -> bytes:
    if precision not in _LE:
        raise CheckpointError(f"unsupported precision {precision!r}")
    header = {
        "version": FORMAT_VERSION,
        "precision": precision,
        "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in tensors.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for a in tensors.values():
        parts.append(np.ascontiguousarray(a, dtype=_LE[precision]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; tensors come back in native byte order."""
    if blob[:8] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {header.get('version')}")
    dt = np.dtype(_LE[header["precision"]])
    offset = 12 + hlen
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + n * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"truncated data for {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob, dtype=dt, count=n, offset=offset).reshape(shape).astype(
            dt.newbyteorder("="))
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return out, header


def save(path: str | Path, tensors: Mapping[str, np.ndarray], precision: str = "float32", meta: dict | None = None) -> str:
    """Write the container and return its sha256 hex digest."""
    blob = encode(tensors, precision, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
