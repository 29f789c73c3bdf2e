"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PGCK"            magic
    u16                format version
    u32                header length in bytes
    header             UTF-8 JSON: {"kind", "meta", "arrays": [{"name", "shape"}, ...]}
    blobs              each array as raw float64 <f8, in header order
    u32                CRC32 of every preceding byte

The JSON is written with sorted keys and no whitespace, so equal state gives
equal bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"PGCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def dumps(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a).tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    return body + _CRC.pack(zlib.crc32(body))


def loads(data: bytes, expect_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size + _CRC.size:
        raise CheckpointError(f"truncated checkpoint: {len(data)} bytes")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    (stored,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    body = data[:-_CRC.size]
    if zlib.crc32(body) != stored:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt or truncated")
    start = _PREFIX.size
    if start + hlen > len(body):
        raise CheckpointError(f"header length {hlen} runs past the end of the file")
    try:
        header = json.loads(body[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"expected a {expect_kind!r} checkpoint, found {kind!r}")
    arrays: dict[str, np.ndarray] = {}
    pos = start + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(body):
            raise CheckpointError(f"array {entry['name']!r} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=nbytes // 8,
                                              offset=pos).reshape(shape).astype(float)
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last array")
    return kind, header["meta"], arrays


def save(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    data = dumps(kind, meta, arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data


def load(path: str | Path, expect_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), expect_kind)
