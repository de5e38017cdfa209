"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FPALAB01"                      8-byte magic
    u32 version                      currently 1
    u32 n, n bytes                   JSON header {"arch": ArchSpec, "meta": {...}}
    u32 count                        number of parameter tensors
    repeated count times:
        u32 n, n bytes               parameter name (utf-8)
        u8  dtype tag                1 = float32
        u32 rank, rank * u32 dims
        raw little-endian data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import ArchSpec, Model, build_model

MAGIC = b"FPALAB01"
VERSION = 1
_DTYPES = {1: np.dtype("<f4")}
_TAGS = {np.dtype("float32"): 1}


def save_checkpoint(model: Model, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"arch": model.spec.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
              struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        arr = p.data
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise FormatError(f"parameter {name} has unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        chunks += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<BI", tag, arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.astype("<f4").tobytes()]
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[ArchSpec, dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (arch spec, metadata, parameter arrays)."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(8, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    n = r.u32("header length")
    at = r.pos
    try:
        header = json.loads(r.take(n, "header").decode())
        spec = ArchSpec.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", at) from None
    params = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "name").decode()
        at = r.pos
        tag, rank = struct.unpack("<BI", r.take(5, "dtype/rank"))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name}", at)
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        dtype = _DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(count * dtype.itemsize, f"data of {name}"), dtype=dtype)
        params[name] = data.reshape(dims).astype(np.float32)
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after last parameter", r.pos)
    return spec, header.get("meta", {}), params


def load_checkpoint(path) -> Model:
    spec, meta, params = read_checkpoint(path)
    model = build_model(spec, 0)
    model.load_state_dict(params)
    model.meta = meta
    return model
