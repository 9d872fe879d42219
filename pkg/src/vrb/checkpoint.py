"""Versioned binary checkpoint container.

Layout: magic ``b"VRBC"``, format version (u32), payload length (u64),
SHA-256 of the payload, then the payload: a count (u32) of named arrays, each
stored as name length (u16), UTF-8 name, dtype code (u8), ndim (u8), shape
(u64 each) and raw little-endian data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError, VersionError

MAGIC = b"VRBC"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def pack_arrays(arrays: dict) -> bytes:
    chunks = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
            arr = arr.astype("<i8")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def unpack_arrays(payload: bytes) -> dict:
    out = {}
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    off = 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nlen]).decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", view, off)
        off += 8 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(bytes(view[off:off + size]), dtype=dtype).reshape(shape).copy()
        off += size
    if off != len(payload):
        raise IntegrityError("trailing bytes after last array")
    return out


def write_container(path, arrays: dict, meta: dict) -> None:
    arrays = dict(arrays)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    payload = pack_arrays(arrays)
    header = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(payload)) + hashlib.sha256(payload).digest()
    Path(path).write_bytes(header + payload)


def read_container(path) -> tuple[dict, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise IntegrityError(f"{p} is not a checkpoint (bad magic or truncated header)")
    version, length = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    digest = blob[16:48]
    payload = blob[48:]
    if len(payload) != length:
        raise IntegrityError(f"{p} is truncated: expected {length} payload bytes, found {len(payload)}")
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{p} failed its checksum")
    try:
        arrays = unpack_arrays(payload)
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    except (struct.error, KeyError, ValueError) as exc:
        raise IntegrityError(f"{p} payload is malformed: {exc}") from exc
    return arrays, meta
