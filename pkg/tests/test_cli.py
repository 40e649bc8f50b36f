import math
import re
import subprocess
import sys

import pytest

from potqat.cli import main

MODEL = ["--n-layer", "1", "--n-head", "2", "--n-embd", "16", "--block-size", "32"]
SMALL = ["--batch", "4", "--ctx", "16", "--eval-batches", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def trained(tmp_path, tiny_corpus_path, capsys):
    out = tmp_path / "float"
    code, _, _ = run(capsys, "train", "--data", tiny_corpus_path, "--out", out, "--iters", 20,
                     "--eval-interval", 10, "--warmup", 5, *MODEL, *SMALL)
    assert code == 0
    return out


def parse_eval(text):
    m = re.search(r"loss (\S+) perplexity (\S+)", text)
    return float(m.group(1)), float(m.group(2))


def test_train_writes_artifacts(trained):
    assert {p.name for p in trained.iterdir()} == {"best.ckpt", "last.ckpt", "metrics.csv"}
    lines = (trained / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,split,loss,perplexity" and len(lines) == 1 + 2 * 2


def test_eval_prints_consistent_perplexity(trained, capsys):
    code, out, _ = run(capsys, "eval", "--ckpt", trained / "best.ckpt", "--batches", 3, "--batch", 4, "--ctx", 16)
    assert code == 0
    loss, ppl = parse_eval(out)
    assert abs(ppl - math.exp(loss)) <= 1e-6 * ppl


def test_every_command_is_reproducible(trained, tmp_path, tiny_corpus_path, capsys):
    def pipeline(tag):
        d = tmp_path / tag
        d.mkdir()
        steps = [
            ("train", "--data", tiny_corpus_path, "--out", d / "f", "--iters", 20, "--eval-interval", 10,
             "--warmup", 5, *MODEL, *SMALL),
            ("ptq", "--ckpt", d / "f" / "best.ckpt", "--levels", 7, "--out", d / "p.ckpt"),
            ("ptq", "--ckpt", d / "f" / "best.ckpt", "--quantize-activations", "--calib-batches", 2,
             "--out", d / "pa.ckpt"),
            ("qat", "--ckpt", d / "f" / "best.ckpt", "--out", d / "q", "--iters", 10, "--eval-interval", 5,
             "--lr", 1e-3, *SMALL),
            ("export", "--ckpt", d / "q" / "best.ckpt", "--out", d / "q.pot4"),
            ("eval", "--ckpt", d / "q.pot4", "--batches", 2),
            ("generate", "--ckpt", d / "q.pot4", "--tokens", 30, "--prompt", "Th"),
            ("size", "--ckpt", d / "q.pot4"),
        ]
        texts = []
        for argv in steps:
            code, out, err = run(capsys, *argv)
            assert code == 0, (argv[0], err)
            texts.append(out.replace(str(d), "<dir>"))
        files = sorted(p for p in d.rglob("*") if p.is_file())
        return {str(p.relative_to(d)): p.read_bytes() for p in files}, texts

    a, b = pipeline("a"), pipeline("b")
    assert a[0].keys() == b[0].keys() and len(a[0]) == 9
    for name in a[0]:
        assert a[0][name] == b[0][name], name
    assert a[1] == b[1]


def test_export_then_eval_matches_converted_model(trained, tmp_path, capsys):
    ptq = tmp_path / "p.ckpt"
    assert run(capsys, "ptq", "--ckpt", trained / "best.ckpt", "--levels", 15, "--out", ptq)[0] == 0
    code, out, _ = run(capsys, "export", "--ckpt", ptq, "--format", "pot4", "--out", tmp_path / "p.pot4")
    assert code == 0 and "87.5000% saving" in out
    l1, _ = parse_eval(run(capsys, "eval", "--ckpt", ptq, "--batches", 3)[1])
    l2, _ = parse_eval(run(capsys, "eval", "--ckpt", tmp_path / "p.pot4", "--batches", 3)[1])
    assert abs(l1 - l2) <= 1e-6
    assert (tmp_path / "p.pot4").stat().st_size < ptq.stat().st_size


def test_generate_length_and_prompt(trained, capsys):
    code, out, _ = run(capsys, "generate", "--ckpt", trained / "best.ckpt", "--prompt", "ROMEO", "--tokens", 25)
    assert code == 0 and out.startswith("ROMEO") and len(out.rstrip("\n")) >= 5
    code, out2, _ = run(capsys, "generate", "--ckpt", trained / "best.ckpt", "--tokens", 25)
    assert code == 0


def test_bench_and_size(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--sizes", "4,8,8;2,3,5", "--repeats", 1, "--out", tmp_path / "b.csv")
    assert code == 0 and out.splitlines()[0] == "m,k,n,float_ns,shift_ns,ratio" and len(out.splitlines()) == 3
    assert (tmp_path / "b.csv").read_text() == out
    code, out, _ = run(capsys, "size", "--params", "124e6")
    assert code == 0 and "496.000 MB" in out and "62.000 MB" in out and "87.5000%" in out


def test_usage_errors_exit_2(capsys):
    for argv in (["frobnicate"], ["eval", "--bogus"], [], ["export", "--ckpt", "x", "--format", "int8", "--out", "y"],
                 ["bench", "--sizes", "1,2"]):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2


def test_runtime_failures_exit_1(trained, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--ckpt", tmp_path / "missing.ckpt")
    assert code == 1 and "error" in err
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"POTQ1\x09")
    code, _, err = run(capsys, "eval", "--ckpt", bad)
    assert code == 1 and "version" in err
    code, _, err = run(capsys, "export", "--ckpt", trained / "best.ckpt", "--out", tmp_path / "x.pot4")
    assert code == 1 and "ptq or qat" in err
    code, _, err = run(capsys, "qat", "--ckpt", trained / "best.ckpt", "--out", tmp_path / "q", "--levels", 8)
    assert code == 1
    code, _, err = run(capsys, "generate", "--ckpt", trained / "best.ckpt", "--temperature", 0)
    assert code == 1
    code, _, _ = run(capsys, "size")
    assert code == 1


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "potqat", "size", "--params", "1000"], capture_output=True, text=True)
    assert r.returncode == 0 and "params" in r.stdout
    r = subprocess.run([sys.executable, "-m", "potqat", "nope"], capture_output=True, text=True)
    assert r.returncode == 2
