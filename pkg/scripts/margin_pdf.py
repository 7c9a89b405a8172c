"""Empirical distribution of the planner's safety margins per strategy.

Usage: python scripts/margin_pdf.py [--seeds 10] [--out out/margins]
"""
import argparse
import os

import numpy as np

from hptune.config import load_config
from hptune.sim import Strategy, run_episode


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--bins", type=int, default=40)
    ap.add_argument("--out", default="out/margins")
    args = ap.parse_args()

    cfg = load_config(args.config)
    ec, t = cfg.episode_config(), cfg.tuning
    os.makedirs(args.out, exist_ok=True)
    edges = np.linspace(t.phi_base, t.phi_max, args.bins + 1)
    samples = {}
    for strategy in (Strategy.HPTUNE, Strategy.REACTIVE_MARGIN, Strategy.FIXED_MARGIN):
        vals = [run_episode(cfg.with_seed(s).scenario, strategy, cfg.initial_params(), ec).margin_samples[:, 3]
                for s in range(args.seeds)]
        samples[strategy.value] = np.concatenate(vals)
        v = samples[strategy.value]
        print(f"{strategy.value:<16} n={len(v):<7} mean={v.mean():.3f} "
              f"share_above_base={np.mean(v > t.phi_base + 1e-9):.3f}")
    hist = {k: np.histogram(v, bins=edges, density=True)[0] for k, v in samples.items()}
    header = "bin_lo,bin_hi," + ",".join(hist)
    table = np.column_stack([edges[:-1], edges[1:], *hist.values()])
    np.savetxt(os.path.join(args.out, "margin_pdf.csv"), table, delimiter=",", header=header, comments="")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; wrote CSV only")
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k, v in samples.items():
        ax.hist(v, bins=edges, density=True, histtype="step", label=k)
    ax.set_xlabel("margin [m]")
    ax.set_ylabel("density")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "margin_pdf.png"), dpi=150)


if __name__ == "__main__":
    main()
