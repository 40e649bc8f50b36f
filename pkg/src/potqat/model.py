"""Character-level decoder-only transformer (pre-norm GPT block layout).

Parameters live in a flat ``{name: Tensor}`` dict so quantization can swap
any of them for a fake-quantized view without touching the forward code.
Linear weights are stored ``[in, out]`` and applied as ``x @ W``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

Params = Dict[str, Tensor]
ActHook = Callable[[str, Tensor], Tensor]

MATMUL_SUFFIXES = ("attn.c_attn.weight", "attn.c_proj.weight", "mlp.c_fc.weight", "mlp.c_proj.weight")
EMBEDDINGS = ("wte", "wpe")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layer: int = 4
    n_head: int = 4
    n_embd: int = 128
    block_size: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 1 or self.n_layer < 0 or self.n_head < 1 or self.n_embd < 1:
            raise ConfigError(f"invalid model sizes: {self}")
        if self.n_embd % self.n_head:
            raise ConfigError(f"n_embd={self.n_embd} not divisible by n_head={self.n_head}")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    d, V = cfg.n_embd, cfg.vocab_size
    shapes = {"wte": (V, d), "wpe": (cfg.block_size, d)}
    for i in range(cfg.n_layer):
        p = f"h.{i}."
        shapes.update({
            p + "ln_1.weight": (d,), p + "ln_1.bias": (d,),
            p + "attn.c_attn.weight": (d, 3 * d), p + "attn.c_attn.bias": (3 * d,),
            p + "attn.c_proj.weight": (d, d), p + "attn.c_proj.bias": (d,),
            p + "ln_2.weight": (d,), p + "ln_2.bias": (d,),
            p + "mlp.c_fc.weight": (d, 4 * d), p + "mlp.c_fc.bias": (4 * d,),
            p + "mlp.c_proj.weight": (4 * d, d), p + "mlp.c_proj.bias": (d,),
        })
    shapes.update({"ln_f.weight": (d,), "ln_f.bias": (d,), "lm_head.weight": (d, V)})
    return shapes


def param_class(name: str) -> str:
    """One of ``matmul``, ``embedding``, ``norm``, ``bias``."""
    if name == "lm_head.weight" or name.endswith(MATMUL_SUFFIXES):
        return "matmul"
    if name in EMBEDDINGS:
        return "embedding"
    if ".ln_" in name or name.startswith("ln_"):
        return "norm"
    return "bias"


def model_init(cfg: ModelConfig, seed: int, dtype=None) -> Params:
    """N(0, 0.02) weights, residual projections scaled by 1/sqrt(2*n_layer), unit norms, zero biases."""
    dtype = np.dtype(dtype or T.get_default_dtype())
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        kind = param_class(name)
        if kind == "norm" and name.endswith("weight"):
            arr = np.ones(shape)
        elif kind in ("norm", "bias"):
            arr = np.zeros(shape)
        else:
            std = 0.02
            if name.endswith("c_proj.weight"):
                std /= math.sqrt(2 * cfg.n_layer)
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def param_count(params: Params) -> int:
    return sum(p.size for p in params.values())


_MASKS: Dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    if t not in _MASKS:
        _MASKS[t] = np.triu(np.ones((t, t), dtype=bool), k=1)
    return _MASKS[t]


def _linear(x, params, prefix, act_hook, bias=True):
    if act_hook is not None:
        x = act_hook(prefix, x)
    y = x @ params[prefix + ".weight"]
    if bias:
        y = y + params[prefix + ".bias"]
    return y


def forward_logits(params: Params, ids, cfg: ModelConfig, rng: Optional[np.random.Generator] = None,
                   act_hook: Optional[ActHook] = None) -> Tensor:
    """Logits ``[B, T, V]`` for integer ids ``[B, T]``.

    Dropout is active only when ``rng`` is given. ``act_hook(name, x)`` sees the
    input of every linear layer (used for activation fake-quant).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, t = ids.shape
    if t > cfg.block_size:
        raise DimensionError(f"sequence length {t} exceeds block_size {cfg.block_size}")
    H, d = cfg.n_head, cfg.n_embd
    hd = d // H
    p_drop = cfg.dropout if rng is not None else 0.0

    x = T.embedding(params["wte"], ids) + T.embedding(params["wpe"], np.arange(t))
    x = T.dropout(x, p_drop, rng)
    mask = _causal_mask(t)
    for i in range(cfg.n_layer):
        p = f"h.{i}."
        h = T.layernorm(x, params[p + "ln_1.weight"], params[p + "ln_1.bias"])
        qkv = _linear(h, params, p + "attn.c_attn", act_hook)
        qkv = qkv.reshape(B, t, 3, H, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        att = T.softmax(T.masked_fill(att, mask, -np.inf), axis=-1)
        att = T.dropout(att, p_drop, rng)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, t, d)
        y = _linear(y, params, p + "attn.c_proj", act_hook)
        x = x + T.dropout(y, p_drop, rng)

        h = T.layernorm(x, params[p + "ln_2.weight"], params[p + "ln_2.bias"])
        h = T.gelu(_linear(h, params, p + "mlp.c_fc", act_hook))
        h = _linear(h, params, p + "mlp.c_proj", act_hook)
        x = x + T.dropout(h, p_drop, rng)

    x = T.layernorm(x, params["ln_f.weight"], params["ln_f.bias"])
    return _linear(x, params, "lm_head", act_hook, bias=False)


def lm_loss(params: Params, x, y, cfg: ModelConfig, rng=None, act_hook=None) -> Tensor:
    logits = forward_logits(params, x, cfg, rng=rng, act_hook=act_hook)
    return T.cross_entropy(logits, y)


def generate(params: Params, cfg: ModelConfig, prompt: Sequence[int], n_tokens: int,
             temperature: float = 0.8, seed: int = 0, start_id: int = 0,
             window: Optional[int] = None, act_hook: Optional[ActHook] = None) -> list:
    """Sample ``n_tokens`` continuation ids; returns prompt + continuation.

    An empty prompt conditions on ``start_id`` without including it in the output.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    window = min(window or cfg.block_size, cfg.block_size)
    rng = np.random.default_rng(seed)
    out = [int(i) for i in prompt]
    ctx = list(out) if out else [int(start_id)]
    with T.no_grad():
        for _ in range(n_tokens):
            logits = forward_logits(params, np.array([ctx[-window:]]), cfg, act_hook=act_hook)
            z = logits.data[0, -1].astype(np.float64) / temperature
            p = np.exp(z - z.max())
            cdf = np.cumsum(p)
            nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            nxt = min(nxt, len(p) - 1)
            out.append(nxt)
            ctx.append(nxt)
    return out
