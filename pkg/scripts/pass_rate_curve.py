"""Pass rate against accumulated slow-level updates, HPTUNE vs SLOW_ONLY.

Usage: python scripts/pass_rate_curve.py [--iterations 500] [--checkpoint-every 100]
       [--eval-trials 50] [--out out/curve]
"""
import argparse
import csv
import os

from hptune.cli import tune_curve
from hptune.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--checkpoint-every", type=int, default=100)
    ap.add_argument("--eval-trials", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="out/curve")
    args = ap.parse_args()

    base = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    curves = {}
    for strategy in ("HPTUNE", "SLOW_ONLY"):
        rows, _ = tune_curve(base.with_strategy(strategy), args.iterations, args.checkpoint_every,
                             args.eval_trials, args.seed, args.workers)
        curves[strategy] = rows
        for k, a, b, rate in rows:
            print(f"{strategy:<10} iteration={k:<5} alpha={a:.4f} beta={b:.4f} pass_rate={rate:.2f}")

    with open(os.path.join(args.out, "pass_rate_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("strategy", "iteration", "alpha", "beta", "pass_rate"))
        for strategy, rows in curves.items():
            w.writerows((strategy, *r) for r in rows)

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; wrote CSV only")
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for strategy, rows in curves.items():
        ax.plot([r[0] for r in rows], [r[3] for r in rows], marker="o", label=strategy)
    ax.set_xlabel("slow-level updates")
    ax.set_ylabel("pass rate")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "pass_rate_curve.png"), dpi=150)


if __name__ == "__main__":
    main()
