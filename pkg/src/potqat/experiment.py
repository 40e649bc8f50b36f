"""Desk-scale float -> PTQ / QAT comparison on the character corpus.

One float run, then for each PoT level count: PTQ of the float weights and a
short QAT fine-tune from them. Everything lands in ``out_dir`` (checkpoints,
metrics CSVs, ``results.json``). A finished run is reused when its config and
the package sources are unchanged.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_corpus
from .model import ModelConfig, model_init
from .qat import (QatConfig, calibrate_ptq, corpus_meta, evaluate, from_checkpoint, perplexity, prepare,
                  qat_run, run_training, to_checkpoint)

# modules that cannot change the numbers a run produces
NOT_FINGERPRINTED = {"__init__.py", "__main__.py", "cli.py"}
DEFAULT_DATA = Path(__file__).resolve().parents[2] / "data" / "shakespeare.txt"


@dataclass
class DeskConfig:
    data: str = str(DEFAULT_DATA)
    float_iters: int = 5000
    float_lr: float = 1e-3
    warmup_iters: int = 100
    float_eval_interval: int = 500
    qat_iters: int = 2000
    qat_lr: float = 0.5e-5
    qat_eval_interval: int = 100
    levels: Tuple[int, ...] = (7, 11, 15)
    eval_batches: int = 20
    batch_size: int = 12
    context_length: int = 64
    seed: int = 1337
    n_layer: int = 4
    n_head: int = 4
    n_embd: int = 128
    block_size: int = 128
    dropout: float = 0.1

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode())
        for src in sorted(Path(__file__).parent.glob("*.py")):
            if src.name in NOT_FINGERPRINTED:
                continue
            h.update(src.name.encode())
            h.update(src.read_bytes())
        return h.hexdigest()


@dataclass
class LevelResult:
    levels: int
    ptq_val: float
    qat_initial_val: float
    qat_final_val: float
    qat_best_val: float
    qat_best_iter: int
    ptq_test: float
    qat_test: float
    seconds: float

    @property
    def ptq_ppl(self) -> float:
        return perplexity(self.ptq_val)

    @property
    def qat_ppl(self) -> float:
        return perplexity(self.qat_final_val)


@dataclass
class DeskResult:
    config: DeskConfig
    fingerprint: str
    float_best_val: float
    float_best_iter: int
    float_test: float
    float_curve: list
    float_seconds: float
    per_level: Dict[int, LevelResult] = field(default_factory=dict)
    reused: bool = False

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_level"] = {str(k): asdict(v) for k, v in self.per_level.items()}
        d.pop("reused")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DeskResult":
        cfg = dict(d["config"])
        cfg["levels"] = tuple(cfg["levels"])
        per_level = {int(k): LevelResult(**v) for k, v in d["per_level"].items()}
        rest = {k: v for k, v in d.items() if k not in ("config", "per_level")}
        return cls(config=DeskConfig(**cfg), per_level=per_level, reused=True, **rest)

    def table(self) -> str:
        lines = [f"float baseline: val {self.float_best_val:.4f} (ppl {perplexity(self.float_best_val):.2f}) "
                 f"at iter {self.float_best_iter}, test {self.float_test:.4f}",
                 "levels  ptq_val  ptq_ppl  qat_first  qat_final  qat_ppl  ptq_test  qat_test"]
        for lv, r in sorted(self.per_level.items()):
            lines.append(f"{lv:6d}  {r.ptq_val:7.4f}  {r.ptq_ppl:7.2f}  {r.qat_initial_val:9.4f}  "
                         f"{r.qat_final_val:9.4f}  {r.qat_ppl:7.2f}  {r.ptq_test:8.4f}  {r.qat_test:8.4f}")
        return "\n".join(lines)


def run_desk(out_dir, cfg: Optional[DeskConfig] = None, log: Callable[[str], None] = print,
             reuse: bool = True) -> DeskResult:
    cfg = cfg or DeskConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    results_path = out / "results.json"
    if reuse and results_path.exists():
        prev = json.loads(results_path.read_text())
        if prev.get("fingerprint") == fp:
            log(f"reusing finished desk run in {out}")
            return DeskResult.from_json(prev)

    corpus = load_corpus(cfg.data)
    mcfg = ModelConfig(vocab_size=corpus.vocab.size, n_layer=cfg.n_layer, n_head=cfg.n_head,
                       n_embd=cfg.n_embd, block_size=cfg.block_size, dropout=cfg.dropout)
    common = dict(eval_batches=cfg.eval_batches, batch_size=cfg.batch_size,
                  context_length=cfg.context_length, seed=cfg.seed)

    def test_loss(model):
        return evaluate(model, corpus.test, cfg.eval_batches, cfg.seed, cfg.batch_size, cfg.context_length)

    t0 = time.perf_counter()
    fcfg = QatConfig.float_training(lr=cfg.float_lr, iters=cfg.float_iters, warmup_iters=cfg.warmup_iters,
                                    eval_interval=cfg.float_eval_interval, **common)
    log(f"float phase: {cfg.float_iters} iters")
    fres = run_training(prepare(mcfg, model_init(mcfg, cfg.seed), fcfg), corpus, fcfg, out / "float",
                        corpus_meta(corpus), log)
    float_ckpt = load_checkpoint(out / "float" / "best.ckpt")
    result = DeskResult(cfg, fp, fres.best_val_loss, fres.best_iter, test_loss(from_checkpoint(float_ckpt)),
                        [[r.iter, r.train_loss, r.val_loss] for r in fres.rows], time.perf_counter() - t0)

    for lv in cfg.levels:
        t0 = time.perf_counter()
        qcfg = QatConfig(levels=lv, lr=cfg.qat_lr, iters=cfg.qat_iters, eval_interval=cfg.qat_eval_interval,
                         **common)
        base = from_checkpoint(float_ckpt)
        ptq = calibrate_ptq(prepare(base.config, base.params, qcfg))
        ptq_val = evaluate(ptq, corpus.val, cfg.eval_batches, cfg.seed, cfg.batch_size, cfg.context_length)
        save_checkpoint(out / f"ptq{lv}.ckpt", to_checkpoint(ptq, dict(float_ckpt.meta, ptq=True)))
        log(f"levels {lv}: ptq val {ptq_val:.4f}; qat {cfg.qat_iters} iters")
        qres = qat_run(float_ckpt, qcfg, corpus, out / f"qat{lv}", log)
        qat_model = from_checkpoint(load_checkpoint(out / f"qat{lv}" / "last.ckpt"))
        result.per_level[lv] = LevelResult(lv, ptq_val, qres.initial_val_loss, qres.final_val_loss,
                                           qres.best_val_loss, qres.best_iter, test_loss(ptq),
                                           test_loss(qat_model), time.perf_counter() - t0)

    results_path.write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(result.table() + "\n")
    log(result.table())
    return result
