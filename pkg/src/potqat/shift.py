"""Multiplication-free matmul against packed PoT weights, plus size/speed accounting.

Weight application is exponent addition: ``x * 2**e`` is computed with
``ldexp`` (adds ``e`` to the float exponent field) and the weight sign is a
negation, so the only multiply left is the per-output ``* scale``.
"""
from __future__ import annotations

import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .errors import ContractError, DimensionError
from .model import param_class
from .quant import MAG_MASK, SIGN_BIT, PackedPotTensor


def shift_matmul(x, W: PackedPotTensor, block: int = 64) -> np.ndarray:
    """``x [m, k] @ W [k, n]`` with no multiply on the weight path.

    Accumulates in float64 (each term is exact) and returns ``x``'s dtype.
    """
    x = np.asarray(x)
    if x.ndim != 2 or len(W.shape) != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"shift_matmul shapes {x.shape} @ {tuple(W.shape)}")
    out_dtype = x.dtype if x.dtype.kind == "f" else np.dtype(np.float64)
    codes = W.unpack()
    m, n = x.shape[0], W.shape[1]
    e = (codes & MAG_MASK).astype(np.int32)
    live = e > 0
    # all-zero weight rows contribute nothing
    rows = np.flatnonzero(live.any(axis=1))
    xa = x[:, rows].astype(np.float64)
    e, live, neg = e[rows], live[rows], (codes[rows] & SIGN_BIT) != 0
    acc = np.zeros((m, n), dtype=np.float64)
    for j in range(0, n, block):
        sl = slice(j, j + block)
        t = np.ldexp(xa[:, :, None], e[None, :, sl])
        t = np.where(neg[None, :, sl], -t, t)
        t = np.where(live[None, :, sl], t, 0.0)
        acc[:, sl] = t.sum(axis=1)
    return (acc * W.scale).astype(out_dtype)


def shift_matmul_reference(x: Sequence[Sequence[float]], W: PackedPotTensor,
                           ops: Optional[Counter] = None) -> List[List[float]]:
    """Scalar reference kernel; ``ops`` counts the ldexp/neg/add/mul operations it performs."""
    ops = Counter() if ops is None else ops
    codes = W.unpack()
    k, n = W.shape
    out = []
    for row in x:
        if len(row) != k:
            raise DimensionError(f"row of length {len(row)} for k={k}")
        out_row = []
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                c = int(codes[kk, j])
                e = c & MAG_MASK
                if e == 0:
                    continue
                term = math.ldexp(row[kk], e)
                ops["ldexp"] += 1
                if c & SIGN_BIT:
                    term = -term
                    ops["neg"] += 1
                acc = acc + term
                ops["add"] += 1
            out_row.append(acc * W.scale)
            ops["mul"] += 1
        out.append(out_row)
    return out


def ulp_distance(a, b) -> np.ndarray:
    """Distance in units in the last place between float32 arrays."""
    ai = np.asarray(a, dtype=np.float32).view(np.int32).astype(np.int64)
    bi = np.asarray(b, dtype=np.float32).view(np.int32).astype(np.int64)
    ai = np.where(ai < 0, -(2 ** 31) - ai, ai)
    bi = np.where(bi < 0, -(2 ** 31) - bi, bi)
    return np.abs(ai - bi)


def oracle_matmul(x, W: PackedPotTensor) -> np.ndarray:
    """Dequantize-then-multiply in float64, rounded to ``x``'s dtype."""
    x = np.asarray(x)
    return (x.astype(np.float64) @ W.dequantize(np.float64)).astype(x.dtype)


# -- size accounting --------------------------------------------------------

@dataclass
class SizeReport:
    dtype: str
    param_count: int
    quantized_params: int
    quantized_tensors: int
    code_bytes: int
    scale_bytes: int
    other_bytes: int

    @property
    def float_bytes(self) -> int:
        return 4 * self.param_count

    @property
    def total_bytes(self) -> int:
        if self.dtype == "f32":
            return self.float_bytes
        return self.code_bytes + self.scale_bytes + self.other_bytes

    @property
    def saving(self) -> float:
        return 1.0 - self.total_bytes / self.float_bytes

    @property
    def quantized_saving(self) -> float:
        """Code bytes versus f32 bytes of the quantized tensors only."""
        if self.dtype == "f32" or not self.quantized_params:
            return 0.0
        return 1.0 - self.code_bytes / (4 * self.quantized_params)

    def lines(self) -> List[str]:
        mb = 1e6
        out = [f"params            {self.param_count}",
               f"f32 size          {self.float_bytes / mb:.3f} MB ({self.float_bytes} B)"]
        if self.dtype == "pot4":
            q32 = 4 * self.quantized_params
            out += [
                f"quantized tensors {self.quantized_tensors} ({self.quantized_params} params)",
                f"  f32 bytes       {q32}",
                f"  pot4 code bytes {self.code_bytes} ({100 * self.quantized_saving:.4f}% saving)",
                f"  scale bytes     {self.scale_bytes}",
                f"unquantized f32   {self.other_bytes} B",
                f"pot4 size         {self.total_bytes / mb:.3f} MB ({self.total_bytes} B, "
                f"{100 * self.saving:.4f}% overall saving)",
            ]
        return out


def size_report(ckpt: Checkpoint, dtype: str = "pot4") -> SizeReport:
    """Byte accounting for storing ``ckpt`` as all-f32 or with pot4 weights.

    Tensors count as quantized when already packed, when listed in the
    checkpoint's quant section, or (float checkpoints) when they are matmul weights.
    """
    if dtype not in ("f32", "pot4"):
        raise ValueError(f"dtype must be f32 or pot4, got {dtype!r}")
    listed = set((ckpt.meta.get("quant") or {}).get("scales", {}))
    total = qparams = qtensors = code_bytes = other = 0
    for name, t in ckpt.tensors.items():
        numel = t.numel if isinstance(t, PackedPotTensor) else int(np.size(t))
        total += numel
        packed = isinstance(t, PackedPotTensor)
        if packed or name in listed or (not listed and param_class(name) == "matmul"):
            qparams += numel
            qtensors += 1
            code_bytes += (numel + 1) // 2
        else:
            other += 4 * numel
    return SizeReport(dtype, total, qparams, qtensors, code_bytes, 4 * qtensors, other)


def model_size_bytes(ckpt: Checkpoint, dtype: str = "pot4") -> int:
    return size_report(ckpt, dtype).total_bytes


def synthetic_size_report(param_count: int) -> SizeReport:
    """Accounting for a model stored as one fully quantized tensor."""
    return SizeReport("pot4", param_count, param_count, 1, (param_count + 1) // 2, 4, 0)


# -- benchmark --------------------------------------------------------------

BENCH_HEADER = "m,k,n,float_ns,shift_ns,ratio"


@dataclass
class BenchRow:
    m: int
    k: int
    n: int
    float_ns: int
    shift_ns: int
    max_ulp: int

    @property
    def ratio(self) -> float:
        """Float time over shift time; above 1 means the shift kernel is faster."""
        return self.float_ns / self.shift_ns if self.shift_ns else float("inf")

    def csv(self) -> str:
        return f"{self.m},{self.k},{self.n},{self.float_ns},{self.shift_ns},{self.ratio:.4f}"


def _median_ns(fn, repeats: int) -> int:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def bench_matmul(sizes: Iterable[Sequence[int]], repeats: int = 5, seed: int = 0,
                 levels: int = 15, max_ulp: int = 2) -> List[BenchRow]:
    """Time float32 ``x @ dequant(W)`` against :func:`shift_matmul` at each ``(m, k, n)``.

    Both kernels are checked against the float64 oracle before timing.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        m, k, n = (int(s) for s in size)
        if min(m, k, n) < 1:
            raise ValueError(f"sizes must be >= 1, got {size}")
        x = rng.standard_normal((m, k)).astype(np.float32)
        W = PackedPotTensor.from_array(rng.standard_normal((k, n)).astype(np.float32) * 0.05, levels)
        Wd = W.dequantize(np.float32)
        ref = oracle_matmul(x, W)
        got = shift_matmul(x, W)
        worst = int(ulp_distance(got, ref).max())
        if worst > max_ulp:
            raise ContractError(f"shift_matmul differs from oracle by {worst} ulp at {(m, k, n)}")
        rows.append(BenchRow(m, k, n, _median_ns(lambda: x @ Wd, repeats),
                             _median_ns(lambda: shift_matmul(x, W), repeats), worst))
    return rows


def bench_csv(rows: Iterable[BenchRow]) -> str:
    return "\n".join([BENCH_HEADER, *(r.csv() for r in rows)]) + "\n"
