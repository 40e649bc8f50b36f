"""``potqat`` command line: train -> ptq / qat -> eval / generate / export / bench.

All randomness comes from ``--seed`` through numpy's PCG64 generator, so a
command rerun with the same flags writes byte-identical checkpoints and CSVs.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CharVocab, Corpus, load_corpus
from .errors import DataError, PotQatError
from .model import ModelConfig, generate, model_init
from .qat import (QatConfig, calibrate_ptq, corpus_meta, evaluate, export_pot4, from_checkpoint,
                  perplexity, prepare, qat_run, run_training, to_checkpoint)
from .shift import bench_csv, bench_matmul, size_report, synthetic_size_report
from .tensor import no_grad

DEFAULT_SEED = 1337


def _corpus_for(ckpt, data: Optional[str]) -> Corpus:
    path = data or ckpt.meta.get("data_path")
    if not path:
        raise DataError("checkpoint does not record its corpus; pass --data")
    corpus = load_corpus(path)
    vocab = ckpt.meta.get("vocab")
    if vocab is not None and vocab != corpus.vocab.chars:
        raise DataError(f"{path}: vocabulary differs from the one the checkpoint was trained on")
    return corpus


def _context(args, ckpt) -> int:
    """``--ctx`` if given, else the context the checkpoint was trained with (capped by block_size)."""
    if args.ctx is not None:
        return args.ctx
    return min(ckpt.meta.get("context_length", 64), ckpt.config["block_size"])


def _parse_sizes(text: str):
    sizes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        dims = [int(v) for v in part.split(",")]
        if len(dims) != 3:
            raise argparse.ArgumentTypeError(f"size {part!r} is not m,k,n")
        sizes.append(tuple(dims))
    if not sizes:
        raise argparse.ArgumentTypeError("no sizes given")
    return sizes


def cmd_train(args) -> int:
    corpus = load_corpus(args.data)
    mcfg = ModelConfig(vocab_size=corpus.vocab.size, n_layer=args.n_layer, n_head=args.n_head,
                       n_embd=args.n_embd, block_size=args.block_size, dropout=args.dropout)
    cfg = QatConfig.float_training(lr=args.lr, iters=args.iters, batch_size=args.batch,
                                   context_length=args.ctx, seed=args.seed, eval_interval=args.eval_interval,
                                   eval_batches=args.eval_batches, warmup_iters=args.warmup)
    prepared = prepare(mcfg, model_init(mcfg, args.seed), cfg)
    n_params = sum(p.size for p in prepared.params.values())
    print(f"float training: {n_params} params, vocab {corpus.vocab.size}, {cfg.iters} iters at lr {cfg.lr}")
    run_training(prepared, corpus, cfg, args.out, corpus_meta(corpus))
    print(f"wrote {Path(args.out) / 'best.ckpt'}, {Path(args.out) / 'last.ckpt'}, {Path(args.out) / 'metrics.csv'}")
    return 0


def _quant_config(args, **kw) -> QatConfig:
    schemes = {"matmul": args.scheme, "embedding": args.scheme if args.quantize_embeddings else None}
    return QatConfig(schemes=schemes, levels=args.levels, bits=args.bits, ste_mode=args.ste,
                     quantize_activations=args.quantize_activations, **kw)


def cmd_ptq(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    base = from_checkpoint(ckpt)
    cfg = _quant_config(args, seed=args.seed)
    prepared = prepare(base.config, base.params, cfg)
    split = None
    if args.calib_batches:
        split = _corpus_for(ckpt, args.data).train
    calibrate_ptq(prepared, split, args.calib_batches, args.batch, _context(args, ckpt), seed=args.seed)
    meta = {k: v for k, v in ckpt.meta.items() if k in ("vocab", "data_path", "data_sha256", "context_length")}
    meta.update(float_iter=ckpt.meta.get("iter"), ptq=True)
    size = save_checkpoint(args.out, to_checkpoint(prepared, meta))
    print(f"ptq {args.scheme} ({len(prepared.attachments)} tensors) -> {args.out} ({size} bytes)")
    return 0


def cmd_qat(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    corpus = _corpus_for(ckpt, args.data)
    cfg = _quant_config(args, lr=args.lr, iters=args.iters, batch_size=args.batch, context_length=args.ctx,
                        seed=args.seed, eval_interval=args.eval_interval, eval_batches=args.eval_batches)
    res = qat_run(ckpt, cfg, corpus, args.out)
    print(f"initial post-quantization val {res.initial_val_loss:.6f}, best val {res.best_val_loss:.6f} "
          f"at iter {res.best_iter}, final val {res.final_val_loss:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    corpus = _corpus_for(ckpt, args.data)
    model = from_checkpoint(ckpt)
    loss = evaluate(model, corpus.split(args.split), args.batches, args.seed, args.batch, _context(args, ckpt))
    print(f"split {args.split} loss {loss:.8f} perplexity {perplexity(loss):.8f}")
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab_chars = ckpt.meta.get("vocab")
    if vocab_chars is None:
        raise DataError("checkpoint has no vocabulary")
    vocab = CharVocab(vocab_chars)
    model = from_checkpoint(ckpt)
    prompt = vocab.encode(args.prompt)
    window = ckpt.meta.get("context_length")
    with no_grad():
        params = model.effective_params()
    ids = generate(params, model.config, prompt, args.tokens, args.temperature, args.seed,
                   start_id=vocab.start_id(), window=window, act_hook=model.act_hook(False))
    sys.stdout.write(vocab.decode(ids) + "\n")
    return 0


def cmd_bench(args) -> int:
    rows = bench_matmul(args.sizes, args.repeats, seed=args.seed)
    text = bench_csv(rows)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    packed = export_pot4(ckpt)
    size = save_checkpoint(args.out, packed)
    for line in size_report(packed, "pot4").lines():
        print(line)
    print(f"wrote {args.out} ({size} bytes on disk)")
    return 0


def cmd_size(args) -> int:
    if args.params is not None:
        report = synthetic_size_report(int(float(args.params)))
    elif args.ckpt:
        report = size_report(load_checkpoint(args.ckpt), "pot4")
    else:
        raise DataError("pass --ckpt or --params")
    for line in report.lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="potqat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="full-precision training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=15000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=DEFAULT_SEED)
    t.add_argument("--batch", type=int, default=12)
    t.add_argument("--ctx", type=int, default=64)
    t.add_argument("--warmup", type=int, default=100)
    t.add_argument("--eval-interval", type=int, default=500)
    t.add_argument("--eval-batches", type=int, default=20)
    t.add_argument("--n-layer", type=int, default=4)
    t.add_argument("--n-head", type=int, default=4)
    t.add_argument("--n-embd", type=int, default=128)
    t.add_argument("--block-size", type=int, default=128)
    t.add_argument("--dropout", type=float, default=0.1)
    t.set_defaults(func=cmd_train)

    def quant_flags(q):
        q.add_argument("--scheme", choices=("pot", "affine"), default="pot")
        q.add_argument("--levels", type=int, default=15, help="PoT level count (7, 9, 11, 15)")
        q.add_argument("--bits", type=int, default=4, help="affine bit-width")
        q.add_argument("--ste", choices=("identity", "clipped"), default="identity")
        q.add_argument("--quantize-embeddings", action="store_true")
        q.add_argument("--quantize-activations", action="store_true")
        q.add_argument("--data", default=None, help="override the corpus path stored in the checkpoint")
        q.add_argument("--seed", type=int, default=DEFAULT_SEED)

    q = sub.add_parser("ptq", help="post-training quantization (no training)")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--calib-batches", type=int, default=0)
    q.add_argument("--batch", type=int, default=12)
    q.add_argument("--ctx", type=int, default=None, help="default: the checkpoint's training context")
    quant_flags(q)
    q.set_defaults(func=cmd_ptq)

    q = sub.add_parser("qat", help="quantization-aware fine-tuning")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--lr", type=float, default=0.5e-5)
    q.add_argument("--iters", type=int, default=2000)
    q.add_argument("--batch", type=int, default=12)
    q.add_argument("--ctx", type=int, default=64)
    q.add_argument("--eval-interval", type=int, default=100)
    q.add_argument("--eval-batches", type=int, default=20)
    quant_flags(q)
    q.set_defaults(func=cmd_qat)

    e = sub.add_parser("eval", help="mean cross-entropy and perplexity")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.add_argument("--batches", type=int, default=20)
    e.add_argument("--seed", type=int, default=DEFAULT_SEED)
    e.add_argument("--batch", type=int, default=12)
    e.add_argument("--ctx", type=int, default=None, help="default: the checkpoint's training context")
    e.add_argument("--data", default=None)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="sample text")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--prompt", default="")
    g.add_argument("--tokens", type=int, default=200)
    g.add_argument("--temperature", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="float matmul vs shift matmul timing")
    b.add_argument("--sizes", type=_parse_sizes, default=_parse_sizes("64,128,128;64,512,512;256,256,256"))
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export", help="pack PoT weights into 4-bit codes")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--format", choices=("pot4",), default="pot4")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    s = sub.add_parser("size", help="f32 vs pot4 byte accounting")
    s.add_argument("--ckpt", default=None)
    s.add_argument("--params", default=None, help="synthetic parameter count, e.g. 124e6")
    s.set_defaults(func=cmd_size)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PotQatError, OSError, ValueError, IndexError, KeyError) as err:
        print(f"potqat {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
