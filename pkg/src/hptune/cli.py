"""Command-line entry point: ``hptune {run,bench,tune,gradcheck}``.

Every output file embeds the resolved config and seed. JSON files carry them
as fields, CSV files as a leading ``# config: {...}`` comment line.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .config import ConfigError, RunConfig, dumps, load_config
from .sim import Outcome, Strategy, run_episode, tune_params
from .tuning import ParamRecord, gradient_check

EXIT_OK, EXIT_CONFIG, EXIT_ACCEPT = 0, 1, 2
TRAIN_SEED_OFFSET = 100_000  # training episodes never reuse evaluation seeds


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv_text(header, rows, meta: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# config: {dumps(meta)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"config": cfg.to_dict(), **extra}


# --- run ------------------------------------------------------------------


def episode_files(cfg: RunConfig, tune: bool = True) -> dict:
    """Run one episode and render its output files as ``{name: text}``."""
    res = run_episode(cfg.scenario, cfg.strategy, cfg.initial_params(), cfg.episode_config(), tune=tune)
    meta = _meta(cfg, seed=cfg.scenario.seed)
    lines = [dumps({"type": "header", **meta})]
    lines += [dumps({"type": "step", **st}) for st in res.steps]
    metrics = {
        **meta,
        "strategy": res.strategy.value,
        "outcome": res.outcome.value,
        "pass_time": res.pass_time,
        "avg_acc": res.avg_acc,
        "avg_jerk": res.avg_jerk,
        "steps": len(res.steps),
        "infeasible_steps": res.infeasible_steps,
        "n_updates": res.n_updates,
        "final_alpha": res.final_params.alpha,
        "final_beta": res.final_params.beta,
    }
    margins = [(int(t), int(h), int(n), float(phi)) for t, h, n, phi in res.margin_samples]
    return {
        "trajectory.jsonl": "\n".join(lines) + "\n",
        "metrics.json": json.dumps(metrics, sort_keys=True, indent=2) + "\n",
        "margins.csv": _csv_text(("t", "h", "obstacle", "phi"), margins, meta),
        "params.csv": _csv_text(ParamRecord.FIELDS, [r.row() for r in res.param_trace], meta),
    }


def cmd_run(args, cfg: RunConfig) -> int:
    out = args.out or cfg.output.dir
    files = episode_files(cfg, tune=not args.no_tune)
    for name, text in files.items():
        _write(os.path.join(out, name), text)
    m = json.loads(files["metrics.json"])
    print(f"{m['strategy']} seed={cfg.scenario.seed} outcome={m['outcome']} "
          f"pass_time={m['pass_time']} avg_jerk={m['avg_jerk']:.4f}")
    return EXIT_OK


# --- bench ----------------------------------------------------------------


def _bench_one(job):
    cfg, strategy, seed, params = job
    r = run_episode(replace(cfg.scenario, seed=seed), strategy, params, cfg.episode_config(), tune=False)
    return (strategy.value, seed, r.outcome.value, r.pass_time, r.avg_acc, r.avg_jerk)


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def tuned_params(cfg: RunConfig, strategy: Strategy, n_updates: int, seed0: int):
    """Parameters after ``n_updates`` slow-level updates on the training seed block."""
    p0 = cfg.initial_params()
    if n_updates <= 0 or not strategy.tunes:
        return p0
    p, _ = tune_params(cfg.scenario, strategy, p0, n_updates, seed0 + TRAIN_SEED_OFFSET, cfg.episode_config())
    return p


def summarize(detail) -> list:
    """Per-strategy rows (strategy, n_trials, pass_rate, avg_acc, avg_jerk, avg_time).

    Motion metrics average PASS episodes only; they are empty when none passed.
    """
    out = []
    for st in sorted({r[0] for r in detail}):
        rows = [r for r in detail if r[0] == st]
        ok = [r for r in rows if r[2] == Outcome.PASS.value]
        avg = (lambda k: float(np.mean([r[k] for r in ok]))) if ok else (lambda k: None)
        out.append((st, len(rows), len(ok) / len(rows), avg(4), avg(5), avg(3)))
    return out


def bench(cfg: RunConfig, strategies, n_trials: int, seed0: int, tune_updates: int = 0, workers: int = 1):
    """Paired-seed benchmark; returns (detail rows, summary rows, params per strategy)."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    strategies = [Strategy(st) for st in strategies]
    params = {st: tuned_params(cfg, st, tune_updates, seed0) for st in strategies}
    jobs = [(cfg, st, seed0 + i, params[st]) for st in strategies for i in range(n_trials)]
    detail = sorted(_map(_bench_one, jobs, workers), key=lambda r: (r[0], r[1]))
    return detail, summarize(detail), params


def cmd_bench(args, cfg: RunConfig) -> int:
    strategies = [Strategy(s) for s in args.strategies] if args.strategies else list(Strategy)
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    seed0 = cfg.scenario.seed if args.seed is None else args.seed
    detail, summary, params = bench(cfg, strategies, args.trials, seed0, args.tune_updates, args.workers)
    meta = _meta(cfg, seed=seed0, n_trials=args.trials, tune_updates=args.tune_updates,
                 params={st.value: [p.alpha, p.beta] for st, p in params.items()})
    out = args.out or cfg.output.dir
    _write(os.path.join(out, "bench_detail.csv"), _csv_text(
        ("strategy", "seed", "outcome", "pass_time", "avg_acc", "avg_jerk"), detail, meta))
    _write(os.path.join(out, "bench_summary.csv"), _csv_text(
        ("strategy", "n_trials", "pass_rate", "avg_acc", "avg_jerk", "avg_time"), summary, meta))
    for row in summary:
        print("{:<16} pass_rate={:.3f} avg_jerk={}".format(row[0], row[2], row[4]))
    return EXIT_OK


# --- tune -----------------------------------------------------------------


def tune_curve(cfg: RunConfig, n_iterations: int, checkpoint_every: int, eval_trials: int, seed0: int,
               workers: int = 1):
    """Pass-rate curve over accumulating slow-level updates.

    Training runs on seeds ``seed0 + TRAIN_SEED_OFFSET + k``; checkpoints freeze
    the parameters and evaluate on the held-out block ``seed0 .. seed0 + eval_trials - 1``.
    """
    if n_iterations < 1 or checkpoint_every < 1 or eval_trials < 1:
        raise ValueError("iterations, checkpoint interval and eval trials must be >= 1")
    strategy = cfg.strategy
    checkpoints = []

    def on_ck(k, params):
        jobs = [(cfg, strategy, seed0 + i, params) for i in range(eval_trials)]
        res = _map(_bench_one, jobs, workers)
        rate = sum(r[2] == Outcome.PASS.value for r in res) / eval_trials
        checkpoints.append((k, params.alpha, params.beta, rate))

    _, trace = tune_params(cfg.scenario, strategy, cfg.initial_params(), n_iterations,
                           seed0 + TRAIN_SEED_OFFSET, cfg.episode_config(), checkpoint_every, on_ck)
    return checkpoints, trace


def cmd_tune(args, cfg: RunConfig) -> int:
    if not cfg.strategy.tunes:
        print(f"error: strategy {cfg.strategy.value} has no slow level to tune", file=sys.stderr)
        return EXIT_CONFIG
    seed0 = cfg.scenario.seed if args.seed is None else args.seed
    try:
        checkpoints, trace = tune_curve(cfg, args.iterations, args.checkpoint_every, args.eval_trials,
                                        seed0, args.workers)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    meta = _meta(cfg, seed=seed0, iterations=args.iterations, checkpoint_every=args.checkpoint_every,
                 eval_trials=args.eval_trials)
    out = args.out or cfg.output.dir
    _write(os.path.join(out, "tune_curve.csv"),
           _csv_text(("iteration", "alpha", "beta", "pass_rate"), checkpoints, meta))
    _write(os.path.join(out, "tune_trace.csv"), _csv_text(ParamRecord.FIELDS, [r.row() for r in trace], meta))
    for k, a, b, rate in checkpoints:
        print(f"iteration={k} alpha={a:.6f} beta={b:.6f} pass_rate={rate:.3f}")
    return EXIT_OK


# --- gradcheck --------------------------------------------------------------


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.samples < 1:
        print("error: --samples must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg.scenario.seed if args.seed is None else args.seed
    ec = cfg.episode_config()
    worst, rows = gradient_check(args.samples, seed, ec.weights, ec.margins)
    ok = worst <= args.threshold
    print(f"samples={args.samples} seed={seed} max_rel_err={worst:.3e} threshold={args.threshold:.0e} "
          f"{'PASS' if ok else 'FAIL'}")
    if args.out:
        report = {**_meta(cfg, seed=seed), "samples": args.samples, "max_rel_err": worst,
                  "threshold": args.threshold, "pass": ok}
        _write(os.path.join(args.out, "gradcheck.json"), json.dumps(report, sort_keys=True, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_ACCEPT


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hptune", description="Hierarchical margin and weight tuning for MPC navigation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults apply to omitted keys)")
        sp.add_argument("--seed", type=int, help="override scenario.seed")
        sp.add_argument("--out", help="output directory (default: output.dir)")

    sp = sub.add_parser("run", help="run one episode")
    common(sp)
    sp.add_argument("--strategy", choices=[s.value for s in Strategy])
    sp.add_argument("--no-tune", action="store_true", help="freeze (alpha, beta) during the episode")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("bench", help="paired-seed strategy comparison")
    common(sp)
    sp.add_argument("--strategies", nargs="+", choices=[s.value for s in Strategy])
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--tune-updates", type=int, default=0,
                    help="slow-level updates on training seeds before evaluation")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("tune", help="pass-rate curve over slow-level updates")
    common(sp)
    sp.add_argument("--strategy", choices=[s.value for s in Strategy])
    sp.add_argument("--iterations", type=int, default=500)
    sp.add_argument("--checkpoint-every", type=int, default=100)
    sp.add_argument("--eval-trials", type=int, default=50)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference loss gradients")
    common(sp)
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.command == "run":
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "strategy", None):
        cfg = cfg.with_strategy(args.strategy)
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
