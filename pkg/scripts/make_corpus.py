"""Build the ~1 MB desk corpus from the public-domain Shakespeare texts.

The texts ship inside the ``shakespeare`` sdist on PyPI (Project Gutenberg
sources). Plays are concatenated in sorted filename order and the result is
cut at the last line break before ``--chars`` characters.

    python scripts/make_corpus.py --out data/shakespeare.txt
"""
import argparse
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PLAYS_DIR = "shksprdata/texts/"


def fetch_sdist(workdir: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
         "shakespeare==0.6", "-d", str(workdir)],
        check=True,
    )
    return next(workdir.glob("shakespeare-*.tar.gz"))


def build(sdist: Path, n_chars: int) -> str:
    parts = []
    with tarfile.open(sdist) as tar:
        members = sorted(
            (m for m in tar.getmembers()
             if PLAYS_DIR in m.name and m.name.endswith("_gut.txt")),
            key=lambda m: m.name,
        )
        for m in members:
            text = tar.extractfile(m).read().decode("utf-8", errors="replace")
            parts.append(text.replace("\r\n", "\n").strip() + "\n\n")
            if sum(map(len, parts)) >= n_chars:
                break
    text = "".join(parts)[:n_chars]
    return text[: text.rfind("\n") + 1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/shakespeare.txt"))
    ap.add_argument("--chars", type=int, default=1_000_000)
    ap.add_argument("--sdist", type=Path, default=None, help="use a local shakespeare-0.6.tar.gz")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        sdist = args.sdist or fetch_sdist(Path(tmp))
        text = build(sdist, args.chars)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text, encoding="utf-8")
    print(f"wrote {len(text)} chars, {len(set(text))} distinct, to {args.out}")


if __name__ == "__main__":
    main()
