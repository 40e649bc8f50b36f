"""Dense numpy tensors with tape-ordered reverse-mode autodiff.

Every differentiable op records a :class:`Node` carrying a global sequence
number. ``Tensor.backward`` collects the nodes reachable from the root and
visits them in exact reverse recording order, so gradients are reproducible
bit-for-bit for identical inputs.

Computation is float32 unless a float64 default is selected with
:func:`default_dtype` (used by gradient checks).
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_DEBUG = False
_SEQ = itertools.count()

GELU_C = math.sqrt(2.0 / math.pi)


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def debug_checks():
    """Raise as soon as an op turns finite inputs into NaN/Inf (masked_fill excepted)."""
    global _DEBUG
    prev = _DEBUG
    _DEBUG = True
    try:
        yield
    finally:
        _DEBUG = prev


class Node:
    """One recorded op: its inputs, a backward closure and its tape position."""

    __slots__ = ("op", "inputs", "backward_fn", "seq", "freed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, seq: int):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = seq
        self.freed = False

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if grad is None:
            grad = np.ones_like(self.data)
        if self.node is None:
            if not self.requires_grad:
                raise ContractError("root does not require grad")
            _accumulate(self, grad)
            return
        if self.node.freed:
            raise ContractError("graph already backpropagated; run the forward pass again")

        nodes = _reachable(self.node)
        pending = {self.node: grad}
        for node in nodes:
            g = pending.pop(node, None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is not None:
                    prev = pending.get(t.node)
                    pending[t.node] = gi if prev is None else prev + gi
                else:
                    _accumulate(t, gi)
        for node in nodes:
            node.freed = True
            node.backward_fn = None
            node.inputs = ()

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ContractError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _reachable(root: Node) -> list:
    seen = {root}
    stack = [root]
    while stack:
        node = stack.pop()
        for t in node.inputs:
            n = t.node
            if n is not None and n not in seen:
                if n.freed:
                    raise ContractError("graph already backpropagated; run the forward pass again")
                seen.add(n)
                stack.append(n)
    return sorted(seen, key=lambda n: n.seq, reverse=True)


def trace(root: Tensor) -> list:
    """Nodes reachable from ``root`` in recording order."""
    if root.node is None:
        return []
    return _reachable(root.node)[::-1]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; records a node when any input needs grad.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    if _DEBUG and op != "masked_fill" and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericalError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn, next(_SEQ))
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = np.asarray(b, dtype=a.dtype)
        return apply_op("mul", a.data * c, (a,), lambda g: (unbroadcast(g * c, a.shape),))
    a = as_tensor(a)
    return apply_op("mul", a.data * b.data, (a, b),
                    lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return mul(a, 1.0 / np.asarray(b, dtype=a.dtype))
    a = as_tensor(a)
    out = a.data / b.data
    return apply_op("div", out, (a, b),
                    lambda g: (unbroadcast(g / b.data, a.shape),
                               unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    return apply_op("pow", a.data ** exponent, (a,),
                    lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return apply_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return apply_op("gelu", out, (x,), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return apply_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; no gradient flows there."""
    out = np.where(mask, x.dtype.type(value), x.data)
    return apply_op("masked_fill", out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


# -- shape ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return apply_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return apply_op("getitem", x.data[idx], (x,), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return apply_op("sum", np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes, batch axes broadcast numpy-style."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def mm(x, y):
        # [..., m, k] @ [k, n] as a single GEMM
        if y.ndim == 2 and x.ndim > 2:
            return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
        return x @ y

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold batch axes into one GEMM instead of a batched product + sum
                k = a.shape[-1]
                a2 = np.broadcast_to(a.data, g.shape[:-1] + (k,)).reshape(-1, k)
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return apply_op("matmul", mm(a.data, b.data), (a, b), backward)


# -- normalisation / probabilities ---------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layernorm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine params must be ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op("layernorm", out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    y = _softmax(x.data, axis)
    return apply_op("softmax", y, (x,),
                    lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over all leading positions."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"{t.shape[0]} targets for {z.shape[0]} rows of logits")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    rows = np.arange(n)
    loss = (lse[:, 0] - z[rows, t]).mean()

    def backward(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return apply_op("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return apply_op("embedding", table.data[ids], (table,), backward)
