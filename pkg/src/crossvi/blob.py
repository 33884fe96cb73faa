"""Binary container: JSON header + flat little-endian float64 payload.

Layout: 8-byte magic, u64-le header length, UTF-8 JSON header, then the
raw array data concatenated in header order. The header carries arbitrary
JSON metadata under ``"meta"`` and one shape entry per array under
``"arrays"``. The format is deterministic: identical inputs produce
identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"XVIBLOB1"


def pack(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize ``meta`` plus named float64 arrays to bytes."""
    entries = []
    payload = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        payload.append(a.tobytes())
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header] + payload)


def unpack(blob: bytes, path=None) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`pack`; returns ``(meta, arrays)``."""
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ParseError("not a crossvi blob (bad magic)", path=path)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ParseError("truncated blob header", path=path)
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad blob header: {exc}", path=path) from exc
    arrays = {}
    offset = 16 + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ParseError(f"truncated array {entry['name']!r}", path=path)
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ParseError("trailing bytes after arrays", path=path)
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(meta, arrays))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return unpack(fh.read(), path=path)
