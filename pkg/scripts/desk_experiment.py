"""Run the desk-scale float -> PTQ / QAT comparison and print the summary table.

    python3 scripts/desk_experiment.py --out runs/desk
"""
import argparse

from potqat.experiment import DeskConfig, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--data", default=DeskConfig.data)
    p.add_argument("--float-iters", type=int, default=DeskConfig.float_iters)
    p.add_argument("--qat-iters", type=int, default=DeskConfig.qat_iters)
    p.add_argument("--levels", default="7,11,15")
    p.add_argument("--seed", type=int, default=DeskConfig.seed)
    p.add_argument("--fresh", action="store_true", help="ignore a finished run in --out")
    a = p.parse_args()
    cfg = DeskConfig(data=a.data, float_iters=a.float_iters, qat_iters=a.qat_iters,
                     levels=tuple(int(v) for v in a.levels.split(",")), seed=a.seed)
    run_desk(a.out, cfg, reuse=not a.fresh)


if __name__ == "__main__":
    main()
