"""Affine and power-of-two quantizers, observers, STE fake-quant and the pot4 code format.

PoT level set for ``levels = 2*e_max + 1``::

    {0} U {+-scale * 2**e : 1 <= e <= e_max}

A magnitude ``v = |x| / scale`` is rounded to the nearest exponent in the log
domain and clipped to ``e_max``; anything below ``v = 2**0.5`` (the log-midpoint
under the smallest nonzero level) flushes to zero.

4-bit code: bit 3 is the sign (1 = negative), bits 0..2 hold the exponent,
0 meaning the value zero. ``0b1000`` is never produced and is rejected.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import FormatError, NumericalError, SpecError
from .tensor import Tensor, apply_op

POT_LEVELS = (7, 9, 11, 15)
NEG_ZERO = 0b1000
SIGN_BIT = 0b1000
MAG_MASK = 0b0111


class Scheme(str, enum.Enum):
    AFFINE = "affine"
    POT = "pot"


class SteMode(str, enum.Enum):
    IDENTITY = "identity"
    CLIPPED = "clipped"


@dataclass(frozen=True)
class QuantSpec:
    """A quantization scheme plus its (possibly not yet calibrated) scale."""

    scheme: Scheme
    levels: int = 15
    bits: int = 4
    signed: bool = False
    scale: float = 1.0
    zero_point: int = 0
    ste_mode: SteMode = SteMode.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "ste_mode", SteMode(self.ste_mode))
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise SpecError(f"scale must be positive and finite, got {self.scale}")
        if self.scheme is Scheme.POT:
            if self.levels % 2 == 0 or not 3 <= self.levels <= 15:
                raise SpecError(f"PoT levels must be odd in [3, 15], got {self.levels}")
        else:
            if not 2 <= self.bits <= 8:
                raise SpecError(f"affine bit-width must be in [2, 8], got {self.bits}")
            if not self.qmin <= self.zero_point <= self.qmax:
                raise SpecError(f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]")

    @classmethod
    def pot(cls, levels: int = 15, scale: float = 1.0, ste_mode=SteMode.IDENTITY) -> "QuantSpec":
        return cls(Scheme.POT, levels=levels, scale=scale, ste_mode=ste_mode)

    @classmethod
    def affine(cls, bits: int = 8, scale: float = 1.0, zero_point: int = 0, signed: bool = False,
               ste_mode=SteMode.IDENTITY) -> "QuantSpec":
        return cls(Scheme.AFFINE, bits=bits, signed=signed, scale=scale, zero_point=zero_point,
                   ste_mode=ste_mode)

    @property
    def e_max(self) -> int:
        return (self.levels - 1) // 2

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    def with_scale(self, scale: float, zero_point: Optional[int] = None) -> "QuantSpec":
        zp = self.zero_point if zero_point is None else int(zero_point)
        return dataclasses.replace(self, scale=float(scale), zero_point=zp)

    def to_dict(self) -> dict:
        d = {"scheme": self.scheme.value, "ste_mode": self.ste_mode.value}
        if self.scheme is Scheme.POT:
            d["levels"] = self.levels
        else:
            d.update(bits=self.bits, signed=self.signed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Observer:
    """Running min/max of everything it has seen."""

    min_seen: float = math.inf
    max_seen: float = -math.inf
    count: int = 0

    def update(self, x) -> "Observer":
        x = np.asarray(x)
        if x.size:
            self.min_seen = min(self.min_seen, float(x.min()))
            self.max_seen = max(self.max_seen, float(x.max()))
            self.count += int(x.size)
        return self

    @property
    def max_abs(self) -> float:
        if self.count == 0:
            return 0.0
        return max(abs(self.min_seen), abs(self.max_seen))


def observer_update(obs: Observer, x) -> Observer:
    return obs.update(x)


# -- scale derivation -------------------------------------------------------

def compute_scale_pot(max_abs: float, spec: QuantSpec) -> float:
    """Anchor the top level ``scale * 2**e_max`` at ``max_abs``; all-zero input gets scale 1."""
    if max_abs < 0:
        raise SpecError(f"max_abs must be >= 0, got {max_abs}")
    if max_abs == 0:
        return 1.0
    return float(max_abs) / (1 << spec.e_max)


def compute_scale_affine(xmin: float, xmax: float, bits: int, signed: bool = False) -> Tuple[float, int]:
    if xmin > xmax:
        raise SpecError(f"min {xmin} > max {xmax}")
    xmin, xmax = min(float(xmin), 0.0), max(float(xmax), 0.0)
    n = (1 << bits) - 1
    if xmax == xmin:
        return 1.0, 0
    scale = (xmax - xmin) / n
    zp = int(np.clip(np.rint(-xmin / scale), 0, n))
    if signed:
        zp -= 1 << (bits - 1)
    return scale, zp


def calibrate(spec: QuantSpec, x=None, observer: Optional[Observer] = None) -> QuantSpec:
    """Return ``spec`` with its scale derived from a tensor or an observer."""
    if observer is None:
        observer = Observer().update(x)
    if spec.scheme is Scheme.POT:
        return spec.with_scale(compute_scale_pot(observer.max_abs, spec))
    if observer.count == 0:
        return spec.with_scale(1.0, 0)
    scale, zp = compute_scale_affine(observer.min_seen, observer.max_seen, spec.bits, spec.signed)
    return spec.with_scale(scale, zp)


# -- affine ---------------------------------------------------------------

def affine_quantize(x, spec: QuantSpec) -> np.ndarray:
    if spec.scheme is not Scheme.AFFINE:
        raise SpecError("affine_quantize needs an affine spec")
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    q = np.rint(x / x.dtype.type(spec.scale)) + spec.zero_point
    return np.clip(q, spec.qmin, spec.qmax).astype(np.int32)


def affine_dequantize(q, spec: QuantSpec, dtype=np.float64) -> np.ndarray:
    dtype = np.dtype(dtype)
    return (np.asarray(q) - spec.zero_point).astype(dtype) * dtype.type(spec.scale)


def affine_levels(spec: QuantSpec) -> np.ndarray:
    return affine_dequantize(np.arange(spec.qmin, spec.qmax + 1), spec)


# -- power of two -----------------------------------------------------------

def make_code(negative, exponent) -> np.ndarray:
    exponent = np.asarray(exponent, dtype=np.uint8)
    sign = np.where(np.asarray(negative) & (exponent > 0), SIGN_BIT, 0).astype(np.uint8)
    return sign | exponent


def _log_midpoints(e_max: int) -> np.ndarray:
    # 2**(k + 0.5): the boundaries of round(log2 v); below the first one is the zero level
    return np.sqrt(2.0) * np.ldexp(1.0, np.arange(e_max))


def pot_exponents(x, spec: QuantSpec) -> np.ndarray:
    """Exponent per element, 0 meaning the zero level.

    Equivalent to ``clip(round(log2(|x|/scale)), 1, e_max)`` with ``|x|/scale < sqrt(2)``
    flushed to zero, but decided by comparisons so no log2 rounding error creeps in.
    """
    x = np.asarray(x)
    if x.dtype.kind not in "fiu":
        raise TypeError(f"cannot quantize dtype {x.dtype}")
    v = np.abs(x.astype(np.float64)) / float(spec.scale)
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite value passed to the PoT quantizer")
    e = np.searchsorted(_log_midpoints(spec.e_max), v, side="right")
    return e.astype(np.uint8)


def pot_quantize(x, spec: QuantSpec) -> np.ndarray:
    """Codes (uint8, one 4-bit code per element) for ``sign(x) * 2**clip(round(log2(|x|/scale)))``."""
    if spec.scheme is not Scheme.POT:
        raise SpecError("pot_quantize needs a PoT spec")
    e = pot_exponents(x, spec)
    return make_code(np.signbit(np.asarray(x)), e)


def validate_codes(codes, e_max: int = 7) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.dtype.kind not in "ui":
        raise FormatError(f"codes must be integers, got {codes.dtype}")
    flat = codes.reshape(-1)
    bad = (flat < 0) | (flat > 15) | (flat == NEG_ZERO) | ((flat & MAG_MASK) > e_max)
    if bad.any():
        i = int(np.argmax(bad))
        raise FormatError(f"invalid PoT code {int(flat[i]):#06b} at index {i} (e_max={e_max})")
    return codes.astype(np.uint8, copy=False)


def pot_dequantize(codes, spec: QuantSpec, dtype=np.float64) -> np.ndarray:
    codes = validate_codes(codes, spec.e_max)
    dtype = np.dtype(dtype)
    e = (codes & MAG_MASK).astype(np.int32)
    mag = np.ldexp(dtype.type(spec.scale), e).astype(dtype, copy=False)
    mag[e == 0] = 0
    return np.where(codes & SIGN_BIT, -mag, mag)


def pot_levels(spec: QuantSpec) -> np.ndarray:
    """Sorted representable values (exactly ``spec.levels`` of them)."""
    pos = spec.scale * 2.0 ** np.arange(1, spec.e_max + 1)
    return np.concatenate([-pos[::-1], [0.0], pos])


def all_pot_codes(e_max: int = 7) -> np.ndarray:
    e = np.arange(1, e_max + 1, dtype=np.uint8)
    return np.concatenate([[0], e, e | SIGN_BIT]).astype(np.uint8)


# -- generic dispatch -------------------------------------------------------

def quantize(x, spec: QuantSpec) -> np.ndarray:
    return pot_quantize(x, spec) if spec.scheme is Scheme.POT else affine_quantize(x, spec)


def dequantize(q, spec: QuantSpec, dtype=np.float64) -> np.ndarray:
    if spec.scheme is Scheme.POT:
        return pot_dequantize(q, spec, dtype)
    return affine_dequantize(q, spec, dtype)


def quant_dequant(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    x = np.asarray(x)
    return dequantize(quantize(x, spec), spec, dtype=x.dtype if x.dtype.kind == "f" else np.float64)


def representable_range(spec: QuantSpec) -> Tuple[float, float]:
    if spec.scheme is Scheme.POT:
        top = spec.scale * 2.0 ** spec.e_max
        return -top, top
    return (spec.qmin - spec.zero_point) * spec.scale, (spec.qmax - spec.zero_point) * spec.scale


def ste_backward(upstream, x, spec: QuantSpec) -> np.ndarray:
    """Straight-through gradient: identity, or identity masked outside the representable range."""
    if spec.ste_mode is SteMode.IDENTITY:
        return upstream
    lo, hi = representable_range(spec)
    x = np.asarray(x)
    inside = (x >= lo) & (x <= hi)
    return np.where(inside, upstream, 0).astype(np.asarray(upstream).dtype, copy=False)


def fake_quant(x: Tensor, spec: QuantSpec) -> Tensor:
    """Quantize-dequantize ``x`` in its own dtype; backward is the straight-through estimator."""
    y = quant_dequant(x.data, spec)
    xd = x.data
    return apply_op("fake_quant", y, (x,), lambda g: (ste_backward(g, xd, spec),))


# -- packed 4-bit storage ---------------------------------------------------

def pack_codes(codes, e_max: int = 7) -> bytes:
    """Two codes per byte, even index in the low nibble; an odd tail pads the high nibble with 0."""
    flat = validate_codes(codes, e_max).reshape(-1)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, np.uint8)])
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_codes(data: bytes, numel: int, e_max: int = 7) -> np.ndarray:
    expect = (numel + 1) // 2
    if len(data) != expect:
        raise FormatError(f"{len(data)} code bytes for {numel} elements, expected {expect}")
    b = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(2 * b.size, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    if numel % 2 and out[-1] != 0:
        raise FormatError("non-zero pad nibble in final byte", offset=expect - 1)
    out = out[:numel]
    try:
        return validate_codes(out, e_max)
    except FormatError as err:
        raise FormatError(str(err)) from None


@dataclass
class PackedPotTensor:
    shape: tuple
    scale: float
    codes: bytes
    levels: int = 15

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec.pot(self.levels, scale=self.scale)

    @property
    def nbytes(self) -> int:
        """Payload size: 4-byte scale plus the nibble codes."""
        return 4 + len(self.codes)

    @classmethod
    def from_array(cls, w: np.ndarray, levels: int = 15, scale: Optional[float] = None) -> "PackedPotTensor":
        w = np.asarray(w)
        spec = QuantSpec.pot(levels)
        spec = calibrate(spec, w) if scale is None else spec.with_scale(scale)
        # scale is stored as f32; quantize against the value that will be read back
        # (denormal-range tensors would round it to 0, so floor it at the smallest normal)
        spec = spec.with_scale(float(max(np.float32(spec.scale), np.finfo(np.float32).tiny)))
        codes = pot_quantize(w, spec)
        return cls(tuple(w.shape), spec.scale, pack_codes(codes, spec.e_max), levels)

    def unpack(self) -> np.ndarray:
        return unpack_codes(self.codes, self.numel, self.spec.e_max).reshape(self.shape)

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return pot_dequantize(self.unpack(), self.spec, dtype)
