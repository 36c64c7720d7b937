"""Versioned little-endian container for named arrays plus JSON metadata.

Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
header, then each array's raw bytes in header order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


class SerializationError(ValueError):
    pass


class FormatError(SerializationError):
    pass


class VersionError(SerializationError):
    pass


class TruncationError(SerializationError):
    pass


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype == np.bool_:
        return "b1"
    if np.issubdtype(a.dtype, np.integer):
        return "i8"
    if np.issubdtype(a.dtype, np.floating):
        return "f8"
    raise TypeError(f"unsupported dtype {a.dtype}")


def encode(magic: bytes, version: int, arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, blobs = [], []
    for name, a in arrays.items():
        a = np.asarray(a)
        code = _dtype_code(a)
        blob = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(a.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    return _PREFIX.pack(magic, version, len(header)) + header + b"".join(blobs)


def decode(data: bytes, magic: bytes, version: int) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _PREFIX.size:
        if data[:len(magic)] != magic[:len(data)]:
            raise FormatError("bad magic bytes")
        raise TruncationError("file shorter than its fixed header")
    got_magic, got_version, header_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"bad magic bytes {got_magic!r}; expected {magic!r}")
    if got_version != version:
        raise VersionError(f"unsupported version {got_version}; expected {version}")
    start = _PREFIX.size
    if len(data) < start + header_len:
        raise TruncationError("file truncated inside header")
    try:
        header = json.loads(data[start:start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    offset = start + header_len
    expected = offset + sum(e["nbytes"] for e in header["arrays"])
    if len(data) < expected:
        raise TruncationError(f"file has {len(data)} bytes; header promises {expected}")
    if len(data) > expected:
        raise FormatError("trailing bytes after last array")
    arrays = {}
    for e in header["arrays"]:
        raw = data[offset:offset + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        offset += e["nbytes"]
    return arrays, header["meta"]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())
