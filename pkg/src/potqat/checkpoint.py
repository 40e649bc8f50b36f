"""Binary checkpoint format.

All integers little-endian, lengths u32::

    magic    b"POTQ1"
    version  u8                      (currently 1)
    config   u32 n, n bytes UTF-8 JSON (sorted keys)
    meta     u32 n, n bytes UTF-8 JSON (sorted keys)
    count    u32
    tensor * count:
        name    u32 n, n bytes UTF-8
        dtype   u8      0 = f32, 1 = pot4
        levels  u8      PoT level count (0 for f32)
        ndim    u8
        dims    ndim * u32
        payload f32:  numel * f32
                pot4: f32 scale, ceil(numel / 2) bytes of packed codes
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import FormatError
from .quant import PackedPotTensor

MAGIC = b"POTQ1"
VERSION = 1
DTYPE_F32 = 0
DTYPE_POT4 = 1

TensorPayload = Union[np.ndarray, PackedPotTensor]


@dataclass
class Checkpoint:
    config: dict
    tensors: Dict[str, TensorPayload] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def float_tensors(self) -> Dict[str, np.ndarray]:
        """Every tensor as float32, pot4 entries dequantized."""
        return {k: v.dequantize(np.float32) if isinstance(v, PackedPotTensor) else v
                for k, v in self.tensors.items()}


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<B", VERSION)
    for section in (ckpt.config, ckpt.meta):
        blob = _json_bytes(section)
        out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(ckpt.tensors))
    for name, t in ckpt.tensors.items():
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        if isinstance(t, PackedPotTensor):
            shape = tuple(t.shape)
            out += struct.pack("<BBB", DTYPE_POT4, t.levels, len(shape))
            out += struct.pack(f"<{len(shape)}I", *shape)
            out += struct.pack("<f", t.scale) + t.codes
        else:
            arr = np.ascontiguousarray(t, dtype="<f4")
            out += struct.pack("<BBB", DTYPE_F32, 0, arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def json(self, what: str):
        (n,) = self.unpack("<I", what + " length")
        at = self.pos
        try:
            return json.loads(self.take(n, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise FormatError(f"corrupt {what}: {err}", at) from None


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    config = r.json("config")
    meta = r.json("meta")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I", "name length")
        at = r.pos
        try:
            name = r.take(n, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", at) from None
        at = r.pos
        dtype, levels, ndim = r.unpack("<BBB", f"{name} header")
        shape = tuple(r.unpack(f"<{ndim}I", f"{name} dims"))
        numel = int(np.prod(shape, dtype=np.int64))
        if dtype == DTYPE_F32:
            if levels != 0:
                raise FormatError(f"{name}: f32 tensor with levels={levels}", at)
            data = r.take(4 * numel, f"{name} payload")
            tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
        elif dtype == DTYPE_POT4:
            if levels % 2 == 0 or not 3 <= levels <= 15:
                raise FormatError(f"{name}: invalid PoT level count {levels}", at)
            (scale,) = r.unpack("<f", f"{name} scale")
            if not (np.isfinite(scale) and scale > 0):
                raise FormatError(f"{name}: invalid scale {scale}", r.pos - 4)
            code_at = r.pos
            codes = r.take((numel + 1) // 2, f"{name} codes")
            packed = PackedPotTensor(shape, float(scale), codes, levels)
            try:
                packed.unpack()
            except FormatError as err:
                raise FormatError(f"{name}: {err}", code_at) from None
            tensors[name] = packed
        else:
            raise FormatError(f"{name}: unknown dtype tag {dtype}", at)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return Checkpoint(config, tensors, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> int:
    """Write atomically; returns the file size in bytes."""
    path = Path(path)
    data = to_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
