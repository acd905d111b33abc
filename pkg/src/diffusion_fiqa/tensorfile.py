"""Self-describing binary table of named arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"FIQATBL1"
    version    u32       currently 1
    count      u32       number of tensors
    per tensor:
        name_len   u32
        name       name_len bytes, UTF-8
        dtype      u8    0=float32 1=float64 2=int64
        rank       u32
        dims       rank x u64
        payload    prod(dims) elements, little-endian
    meta_len   u32
    meta       meta_len bytes, UTF-8 JSON (config echo and extra metadata)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"FIQATBL1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64) if arr.dtype.kind == "f" else arr.astype(np.int64)
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated file while reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ParseError("bad magic; not a tensor table", offset=0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", offset=len(MAGIC))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        start = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", offset=start) from None
        tag_pos = r.pos
        tag, rank = r.unpack("<BI", "dtype/rank")
        if tag not in _DTYPES:
            raise ParseError(f"unknown dtype tag {tag}", offset=tag_pos)
        dims = r.unpack(f"<{rank}Q", "dims") if rank else ()
        dtype = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(size * dtype.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        tensors[name] = arr
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_pos = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt metadata: {exc}", offset=meta_pos) from None
    if r.pos != len(data):
        raise ParseError("trailing bytes after metadata", offset=r.pos)
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
