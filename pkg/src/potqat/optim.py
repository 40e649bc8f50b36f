"""AdamW with bias correction and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .errors import NumericalError
from .tensor import Tensor


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamWState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState, lr: float,
               name: str = "param") -> np.ndarray:
    """Update ``param`` in place and return it."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(f"{name}: shape mismatch param {param.shape} grad {grad.shape} state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
        raise NumericalError(f"{name}: {bad} non-finite gradient entries at step {state.step + 1}")
    b1, b2 = state.betas
    state.step += 1
    if state.weight_decay:
        param *= param.dtype.type(1.0 - lr * state.weight_decay)
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    param -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.dtype, copy=False)
    return param


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = sq ** 0.5
    if max_norm > 0 and norm > max_norm:
        k = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(k)
    return norm


@dataclass
class AdamW:
    """Named-parameter AdamW; ``decay`` selects which names get weight decay."""

    params: Dict[str, Tensor]
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    decay: Optional[Callable[[str], bool]] = None
    state: Dict[str, AdamWState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            wd = self.weight_decay if (self.decay is None or self.decay(name)) else 0.0
            self.state[name] = AdamWState.zeros_like(p.data, betas=self.betas, eps=self.eps, weight_decay=wd)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.state[name], lr, name=name)
