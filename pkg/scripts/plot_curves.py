"""Plot val-loss curves of a desk run (float phase then one QAT run per level).

    python scripts/plot_curves.py --run runs/desk --out runs/desk/curves.png

Needs the ``plot`` extra (matplotlib).
"""
import argparse
import csv
from pathlib import Path


def val_curve(path: Path):
    with open(path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["split"] == "val"]
    return [int(r["iter"]) for r in rows], [float(r["loss"]) for r in rows]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, default=Path("runs/desk"))
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args(argv)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    left.plot(*val_curve(args.run / "float" / "metrics.csv"), marker="o")
    left.set(title="float pretraining", xlabel="iter", ylabel="val loss")
    for d in sorted(args.run.glob("qat*"), key=lambda p: int(p.name[3:])):
        right.plot(*val_curve(d / "metrics.csv"), label=f"PoT-{d.name[3:]}")
    right.set(title="QAT", xlabel="iter", ylabel="val loss")
    right.legend()
    fig.tight_layout()
    out = args.out or args.run / "curves.png"
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
