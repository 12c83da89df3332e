"""Binary ParamSet format.

Layout (little-endian)::

    magic  b"FSPS"  | u32 version
    u32 len + utf-8 fingerprint
    u32 len + utf-8 JSON {arch, num_classes}
    u32 layer count
    per layer: u32 name len, name, u32 ndim, ndim * u32 dims
    payload: row-major float32 arrays in table order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FingerprintMismatch
from .network import ArchConfig, ParamSet, arch_to_dict

MAGIC = b"FSPS"
VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dumps(params: ParamSet) -> bytes:
    meta = json.dumps({"arch": arch_to_dict(params.arch), "num_classes": params.num_classes}, sort_keys=True)
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(params.fingerprint), _pack_str(meta)]
    parts.append(struct.pack("<I", len(params.arrays)))
    for name, a in params.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in params.arrays.values():
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ConfigError("truncated parameter file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(buf: bytes, expect_fingerprint: str | None = None, dtype: str | None = None) -> ParamSet:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ConfigError("not a parameter file")
    if r.u32() != VERSION:
        raise ConfigError("unsupported parameter file version")
    fp = r.string()
    if expect_fingerprint is not None and fp != expect_fingerprint:
        raise FingerprintMismatch(f"file fingerprint {fp} != expected {expect_fingerprint}")
    meta = json.loads(r.string())
    arch_d = meta["arch"]
    if dtype is not None:
        arch_d["dtype"] = dtype
    arch = ArchConfig(**arch_d)
    table = []
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        arrays[name] = a.astype(arch.dtype)
    return ParamSet(arrays, arch, int(meta["num_classes"]), fp)


def save(params: ParamSet, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path, expect_fingerprint: str | None = None, dtype: str | None = None) -> ParamSet:
    return loads(Path(path).read_bytes(), expect_fingerprint, dtype)
