"""Paired-seed comparison of all strategies, printed as a markdown table.

Usage: python scripts/strategy_table.py [--trials 50] [--tune-updates 500] [--workers 1]
"""
import argparse

from hptune.cli import bench
from hptune.config import load_config
from hptune.sim import Strategy


def _fmt(x, spec):
    return "-" if x is None else format(x, spec)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tune-updates", type=int, default=500)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    _, summary, params = bench(cfg, list(Strategy), args.trials, args.seed, args.tune_updates, args.workers)
    print("| strategy | pass rate | AvgAcc | AvgJerk | AvgTime | alpha | beta |")
    print("|---|---|---|---|---|---|---|")
    for st, n, rate, acc, jerk, t in summary:
        p = params[Strategy(st)]
        print(f"| {st} | {rate:.2f} | {_fmt(acc, '.2f')} | {_fmt(jerk, '.2f')} | {_fmt(t, '.2f')} "
              f"| {p.alpha:.3f} | {p.beta:.3f} |")


if __name__ == "__main__":
    main()
