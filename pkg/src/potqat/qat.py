"""Prepare -> train -> convert flow for quantization-aware training, plus PTQ.

``prepare`` attaches a fake-quant to each selected parameter. The optimizer
only ever sees the float shadow weights; the forward pass sees their
quantized image. While training, weight scales are re-derived from the live
tensor on every forward; ``convert`` freezes them and drops the observers.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import Corpus, sample_batch
from .errors import CalibrationError, ConfigError, DataError, NumericalError, StateError
from .model import ModelConfig, Params, forward_logits, param_class
from .optim import AdamW, clip_grad_norm
from .quant import Observer, PackedPotTensor, QuantSpec, Scheme, calibrate, fake_quant
from .tensor import Tensor

PARAM_CLASSES = ("matmul", "embedding")
SCHEMES = ("pot", "affine")
METRICS_HEADER = ("iter", "split", "loss", "perplexity")


def perplexity(l_ce: float) -> float:
    if not math.isfinite(l_ce):
        raise NumericalError(f"perplexity of non-finite loss {l_ce}")
    return math.exp(l_ce)


@dataclass
class QatConfig:
    schemes: Dict[str, Optional[str]] = field(default_factory=lambda: {"matmul": "pot", "embedding": None})
    levels: int = 15
    bits: int = 4
    ste_mode: str = "identity"
    quantize_activations: bool = False
    act_bits: int = 8
    lr: float = 0.5e-5
    warmup_iters: int = 0
    iters: int = 2000
    eval_interval: int = 100
    eval_batches: int = 20
    batch_size: int = 12
    context_length: int = 64
    seed: int = 1337
    weight_decay: float = 0.1
    grad_clip: float = 1.0

    def __post_init__(self):
        unknown = set(self.schemes) - set(PARAM_CLASSES)
        if unknown:
            raise ConfigError(f"unknown parameter class(es) {sorted(unknown)}; expected {PARAM_CLASSES}")
        for cls, scheme in self.schemes.items():
            if scheme not in (None, *SCHEMES):
                raise ConfigError(f"unknown scheme {scheme!r} for {cls}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.context_length < 1 or self.batch_size < 1:
            raise ConfigError("context_length and batch_size must be >= 1")
        if self.eval_interval < 1 or self.eval_batches < 1 or self.iters < 0:
            raise ConfigError("eval_interval and eval_batches must be >= 1, iters >= 0")
        self.weight_spec("matmul")  # validates levels / bits

    @classmethod
    def float_training(cls, **kw) -> "QatConfig":
        """Settings for the full-precision phase: nothing quantized, lr 1e-3."""
        base = dict(schemes={"matmul": None, "embedding": None}, lr=1e-3, warmup_iters=100,
                    iters=15000, eval_interval=500)
        base.update(kw)
        return cls(**base)

    @property
    def quantizes_anything(self) -> bool:
        return any(self.schemes.values()) or self.quantize_activations

    def weight_spec(self, cls: str) -> Optional[QuantSpec]:
        scheme = self.schemes.get(cls)
        if scheme is None:
            return None
        if scheme == "pot":
            return QuantSpec.pot(self.levels, ste_mode=self.ste_mode)
        # uniform weights use the signed range, e.g. 4 bits -> [-8, 7]
        return QuantSpec.affine(self.bits, signed=True, ste_mode=self.ste_mode)

    def act_spec(self) -> QuantSpec:
        return QuantSpec.affine(self.act_bits, signed=False, ste_mode=self.ste_mode)


class Mode(str, enum.Enum):
    TRAINING = "training"
    CONVERTED = "converted"


@dataclass
class Attachment:
    spec: QuantSpec
    observer: Optional[Observer] = field(default_factory=Observer)


class PreparedModel:
    """A model whose selected parameters (and optionally linear inputs) pass through fake-quant."""

    def __init__(self, config: ModelConfig, params: Params, qat: QatConfig):
        self.config = config
        self.params = params
        self.qat = qat
        self.mode = Mode.TRAINING
        self.attachments: Dict[str, Attachment] = {}
        self.act_attachments: Dict[str, Attachment] = {}
        self._frozen: Optional[Params] = None
        for name in params:
            spec = qat.weight_spec(param_class(name)) if param_class(name) in PARAM_CLASSES else None
            if spec is not None:
                self.attachments[name] = Attachment(spec)
        if qat.quantize_activations:
            for name in params:
                if param_class(name) == "matmul":
                    self.act_attachments[name[: -len(".weight")]] = Attachment(qat.act_spec())

    # -- forward ------------------------------------------------------------
    def weight_specs(self) -> Dict[str, QuantSpec]:
        """Specs with scales as the next forward would use them."""
        if self.mode is Mode.CONVERTED:
            return {k: a.spec for k, a in self.attachments.items()}
        return {k: calibrate(a.spec, self.params[k].data) for k, a in self.attachments.items()}

    def effective_params(self, observe: bool = False) -> Params:
        if self._frozen is not None:
            return self._frozen
        out = dict(self.params)
        for name, spec in self.weight_specs().items():
            w = self.params[name]
            if observe and self.attachments[name].observer is not None:
                self.attachments[name].observer.update(w.data)
            out[name] = fake_quant(w, spec)
        return out

    def act_hook(self, observe: bool) -> Optional[Callable]:
        if not self.act_attachments:
            return None

        def hook(name: str, x: Tensor) -> Tensor:
            att = self.act_attachments[name]
            if self.mode is Mode.CONVERTED:
                return fake_quant(x, att.spec)
            if observe:
                att.observer.update(x.data)
            if att.observer.count == 0:
                return x
            return fake_quant(x, calibrate(att.spec, observer=att.observer))

        return hook

    def forward(self, ids, rng=None, observe: bool = False) -> Tensor:
        return forward_logits(self.effective_params(observe), ids, self.config, rng=rng,
                              act_hook=self.act_hook(observe))

    def loss(self, x, y, rng=None, observe: bool = False) -> Tensor:
        return T.cross_entropy(self.forward(x, rng=rng, observe=observe), y)

    def quantized_arrays(self) -> Dict[str, np.ndarray]:
        with T.no_grad():
            eff = self.effective_params()
        return {k: eff[k].data for k in self.attachments}

    # -- state ----------------------------------------------------------------
    def convert(self) -> "PreparedModel":
        return convert(self)

    def quant_section(self) -> Optional[dict]:
        """Frozen-scale description stored in checkpoint metadata."""
        if not self.attachments and not self.act_attachments:
            return None
        specs = self.weight_specs()
        section = {
            "classes": {c: (self.qat.weight_spec(c).to_dict() if self.qat.weight_spec(c) else None)
                        for c in PARAM_CLASSES},
            "scales": {k: s.scale for k, s in specs.items()},
            "zero_points": {k: s.zero_point for k, s in specs.items() if s.scheme is Scheme.AFFINE},
            "activations": None,
            "format": "f32",
        }
        if self.act_attachments:
            act = {}
            for k, a in self.act_attachments.items():
                s = a.spec if self.mode is Mode.CONVERTED else calibrate(a.spec, observer=a.observer)
                act[k] = [s.scale, s.zero_point]
            section["activations"] = {"bits": self.qat.act_bits, "params": act}
        return section


def prepare(config: ModelConfig, params: Params, qat: QatConfig) -> PreparedModel:
    return PreparedModel(config, params, qat)


def convert(prepared: PreparedModel) -> PreparedModel:
    """Freeze every scale from the current weights / observer stats and drop the observers."""
    if prepared.mode is Mode.CONVERTED:
        raise StateError("model is already converted")
    specs = prepared.weight_specs()
    for name, att in prepared.attachments.items():
        att.spec, att.observer = specs[name], None
    for att in prepared.act_attachments.values():
        att.spec = calibrate(att.spec, observer=att.observer)
        att.observer = None
    prepared.mode = Mode.CONVERTED
    with T.no_grad():
        prepared._frozen = prepared.effective_params()
    return prepared


def calibrate_ptq(prepared: PreparedModel, split: Optional[np.ndarray] = None, n_batches: int = 0,
                  batch_size: int = 12, context_length: int = 64, seed: int = 0) -> PreparedModel:
    """Post-training quantization: derive scales without any gradient step, then convert."""
    if prepared.act_attachments:
        if n_batches < 1 or split is None:
            raise CalibrationError("activation quantization needs n_batches >= 1 of calibration data")
        rng = np.random.default_rng(seed)
        with T.no_grad():
            for _ in range(n_batches):
                x, _ = sample_batch(split, batch_size, context_length, rng)
                prepared.forward(x, observe=True)
    return convert(prepared)


def train_step(prepared: PreparedModel, batch, optimizer: AdamW, rng: Optional[np.random.Generator] = None,
               lr: Optional[float] = None, grad_clip: float = 1.0) -> float:
    """One optimizer step on the shadow weights; returns the batch loss."""
    if prepared.mode is not Mode.TRAINING:
        raise StateError("train_step needs a model in training mode (not converted)")
    x, y = batch
    optimizer.zero_grad()
    loss = prepared.loss(x, y, rng=rng, observe=True)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss {value}")
    loss.backward()
    if grad_clip:
        clip_grad_norm(prepared.params, grad_clip)
    optimizer.step(lr)
    return value


def evaluate(prepared: PreparedModel, split: np.ndarray, n_batches: int = 20, seed: int = 1337,
             batch_size: int = 12, context_length: int = 64) -> float:
    """Mean cross-entropy over ``n_batches`` batches drawn with a fresh generator from ``seed``."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if len(split) == 0:
        raise DataError("empty split")
    rng = np.random.default_rng(seed)
    losses = []
    with T.no_grad():
        for _ in range(n_batches):
            x, y = sample_batch(split, batch_size, context_length, rng)
            losses.append(float(prepared.loss(x, y).data))
    return math.fsum(losses) / len(losses)


def make_optimizer(prepared: PreparedModel, qat: QatConfig) -> AdamW:
    return AdamW(prepared.params, lr=qat.lr, weight_decay=qat.weight_decay,
                 decay=lambda name: param_class(name) == "matmul")


# -- checkpoints ------------------------------------------------------------

def corpus_meta(corpus: Corpus) -> dict:
    return {"vocab": corpus.vocab.chars, "data_path": corpus.path, "data_sha256": corpus.sha256}


def to_checkpoint(prepared: PreparedModel, meta: Optional[dict] = None) -> Checkpoint:
    meta = dict(meta or {})
    meta["quant"] = prepared.quant_section()
    tensors = {k: np.array(p.data, dtype=np.float32) for k, p in prepared.params.items()}
    return Checkpoint(prepared.config.to_dict(), tensors, meta)


def _qat_from_section(section: dict) -> QatConfig:
    classes = section.get("classes") or {}
    schemes = {c: (d["scheme"] if d else None) for c, d in classes.items()}
    kw = {}
    for d in classes.values():
        if d:
            kw.update({k: d[k] for k in ("levels", "bits", "ste_mode") if k in d})
    act = section.get("activations")
    if act:
        kw.update(quantize_activations=True, act_bits=act["bits"])
    return QatConfig(schemes=schemes, **kw)


def from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> PreparedModel:
    """Rebuild a model; quantized checkpoints come back converted with their stored scales."""
    config = ModelConfig(**ckpt.config)
    params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True)
              for k, v in ckpt.float_tensors().items()}
    section = ckpt.meta.get("quant")
    if not section:
        return PreparedModel(config, params, QatConfig(schemes={c: None for c in PARAM_CLASSES}))
    prepared = PreparedModel(config, params, _qat_from_section(section))
    zps = section.get("zero_points", {})
    for name, att in prepared.attachments.items():
        att.spec = att.spec.with_scale(section["scales"][name], zps.get(name, att.spec.zero_point))
        att.observer = None
    if section.get("activations"):
        for name, att in prepared.act_attachments.items():
            scale, zp = section["activations"]["params"][name]
            att.spec = att.spec.with_scale(scale, zp)
            att.observer = None
    prepared.mode = Mode.CONVERTED
    with T.no_grad():
        prepared._frozen = prepared.effective_params()
    return prepared


def export_pot4(ckpt: Checkpoint) -> Checkpoint:
    """Replace every PoT-quantized weight by its packed 4-bit form."""
    section = ckpt.meta.get("quant")
    if not section or not section.get("scales"):
        raise ConfigError("checkpoint carries no quantized weights; run ptq or qat first")
    classes = section.get("classes") or {}
    if any(d and d["scheme"] != "pot" for d in classes.values()):
        raise ConfigError("pot4 export needs PoT-quantized weights")
    levels = next(d["levels"] for d in classes.values() if d)
    tensors = dict(ckpt.tensors)
    for name, scale in section["scales"].items():
        w = tensors[name]
        if not isinstance(w, PackedPotTensor):
            tensors[name] = PackedPotTensor.from_array(np.asarray(w, dtype=np.float32), levels, scale=scale)
    meta = dict(ckpt.meta)
    meta["quant"] = dict(section, format="pot4")
    return Checkpoint(dict(ckpt.config), tensors, meta)


# -- training loop ----------------------------------------------------------

@dataclass
class MetricsRow:
    iter: int
    train_loss: float
    val_loss: float


@dataclass
class RunResult:
    prepared: PreparedModel
    initial_val_loss: float
    rows: List[MetricsRow]
    best_val_loss: float
    best_iter: int

    @property
    def final_val_loss(self) -> float:
        return self.rows[-1].val_loss if self.rows else self.initial_val_loss


def write_metrics_csv(path, rows: List[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.iter, "train", f"{r.train_loss:.6f}", f"{perplexity(r.train_loss):.6f}"])
            w.writerow([r.iter, "val", f"{r.val_loss:.6f}", f"{perplexity(r.val_loss):.6f}"])


def run_training(prepared: PreparedModel, corpus: Corpus, cfg: QatConfig, out_dir=None,
                 meta: Optional[dict] = None, log: Callable[[str], None] = print) -> RunResult:
    """Shared loop for the float and QAT phases.

    Evaluates every ``eval_interval`` steps (one row each), keeps ``best.ckpt``
    on val improvement and ``last.ckpt`` at the end, mirrors rows to
    ``metrics.csv`` and ``log``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    batch_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    opt = make_optimizer(prepared, cfg)

    def ev(split):
        return evaluate(prepared, split, cfg.eval_batches, cfg.seed, cfg.batch_size, cfg.context_length)

    def ckpt(it, val):
        m = dict(meta or {})
        m.update(iter=it, val_loss=val, context_length=cfg.context_length, train_config=asdict(cfg))
        return to_checkpoint(prepared, m)

    initial = ev(corpus.val)
    log(f"iter 0: val {initial:.4f} (ppl {perplexity(initial):.2f})")
    rows: List[MetricsRow] = []
    best, best_iter = math.inf, 0
    for it in range(1, cfg.iters + 1):
        lr = cfg.lr * min(1.0, it / cfg.warmup_iters) if cfg.warmup_iters else cfg.lr
        batch = sample_batch(corpus.train, cfg.batch_size, cfg.context_length, batch_rng)
        train_step(prepared, batch, opt, rng=drop_rng, lr=lr, grad_clip=cfg.grad_clip)
        if it % cfg.eval_interval == 0:
            row = MetricsRow(it, ev(corpus.train), ev(corpus.val))
            rows.append(row)
            log(f"iter {it}: train {row.train_loss:.4f} val {row.val_loss:.4f} "
                f"(ppl {perplexity(row.val_loss):.2f})")
            if row.val_loss < best:
                best, best_iter = row.val_loss, it
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", ckpt(it, row.val_loss))
            if out_dir is not None:
                write_metrics_csv(out_dir / "metrics.csv", rows)
    if out_dir is not None:
        final = rows[-1].val_loss if rows else initial
        save_checkpoint(out_dir / "last.ckpt", ckpt(cfg.iters, final))
        write_metrics_csv(out_dir / "metrics.csv", rows)
        if not rows:
            save_checkpoint(out_dir / "best.ckpt", ckpt(0, initial))
    return RunResult(prepared, initial, rows, best, best_iter)


def qat_run(float_ckpt: Checkpoint, cfg: QatConfig, corpus: Corpus, out_dir=None,
            log: Callable[[str], None] = print) -> RunResult:
    """Load float weights, attach fake-quant, fine-tune."""
    if float_ckpt.meta.get("quant"):
        raise ConfigError("qat expects a float (unquantized) checkpoint")
    base = from_checkpoint(float_ckpt)
    prepared = prepare(base.config, base.params, cfg)
    meta = {k: v for k, v in float_ckpt.meta.items() if k in ("vocab", "data_path", "data_sha256")}
    meta["float_iter"] = float_ckpt.meta.get("iter")
    return run_training(prepared, corpus, cfg, out_dir, meta, log)
