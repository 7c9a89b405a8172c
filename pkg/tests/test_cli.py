import csv
import json
import os

import pytest

from hptune.cli import TRAIN_SEED_OFFSET, bench, main, summarize

FREE = {"scenario": {"n_obstacles": 0}}
SHORT = {"scenario": {"n_obstacles": 2, "time_limit": 3.0}}


def _cfg(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def _read_csv(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        assert first.startswith("# config: ")
        meta = json.loads(first[len("# config: "):])
        return meta, list(csv.reader(fh))


def _tree(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            p = os.path.join(root, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, d)] = fh.read()
    return out


def test_run_obstacle_free_passes(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", _cfg(tmp_path, FREE), "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["outcome"] == "PASS"
    assert m["config"]["scenario"]["n_obstacles"] == 0 and m["seed"] == 0
    lines = (out / "trajectory.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["type"] == "header"
    assert len(lines) - 1 == m["steps"]
    meta, rows = _read_csv(out / "margins.csv")
    assert rows[0] == ["t", "h", "obstacle", "phi"]
    assert meta["seed"] == 0


def test_run_byte_identical(tmp_path):
    cfg = _cfg(tmp_path, SHORT)
    for d in ("a", "b"):
        assert main(["run", "--config", cfg, "--seed", "3", "--out", str(tmp_path / d)]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert set(a) == {"trajectory.jsonl", "metrics.json", "margins.csv", "params.csv"}
    assert a == b
    assert json.loads(a["metrics.json"])["seed"] == 3


def test_run_embedded_config_round_trips(tmp_path):
    out = tmp_path / "o"
    main(["run", "--config", _cfg(tmp_path, SHORT), "--out", str(out), "--strategy", "FIXED_MARGIN"])
    embedded = json.loads((out / "metrics.json").read_text())["config"]
    assert embedded["strategy"] == "FIXED_MARGIN"
    out2 = tmp_path / "o2"
    assert main(["run", "--config", _cfg(tmp_path, embedded, "e.json"), "--out", str(out2)]) == 0
    assert _tree(out) == _tree(out2)


@pytest.mark.parametrize("data, key", [
    ({"planner": {"dt": "abc"}}, "planner.dt"),
    ({"scenario": {"obstacles": 3}}, "scenario.obstacles"),
])
def test_run_bad_config_exit_1(tmp_path, capsys, data, key):
    assert main(["run", "--config", _cfg(tmp_path, data), "--out", str(tmp_path / "o")]) == 1
    assert key in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bench_row_accounting(tmp_path):
    out = tmp_path / "b"
    rc = main(["bench", "--config", _cfg(tmp_path, SHORT), "--strategies", "HPTUNE", "FIXED_MARGIN",
               "--trials", "3", "--seed", "5", "--out", str(out)])
    assert rc == 0
    meta, rows = _read_csv(out / "bench_detail.csv")
    assert rows[0] == ["strategy", "seed", "outcome", "pass_time", "avg_acc", "avg_jerk"]
    assert len(rows) - 1 == 6
    assert [(r[0], r[1]) for r in rows[1:]] == [(s, str(k)) for s in ("FIXED_MARGIN", "HPTUNE") for k in (5, 6, 7)]
    _, summ = _read_csv(out / "bench_summary.csv")
    assert summ[0] == ["strategy", "n_trials", "pass_rate", "avg_acc", "avg_jerk", "avg_time"]
    assert len(summ) - 1 == 2
    assert meta["seed"] == 5 and meta["n_trials"] == 3


def test_bench_trials_validation(tmp_path):
    assert main(["bench", "--config", _cfg(tmp_path, FREE), "--trials", "0", "--out", str(tmp_path)]) == 1


def test_summary_uses_pass_episodes_only():
    detail = [
        ("A", 0, "PASS", 10.0, 1.0, 2.0),
        ("A", 1, "COLLISION", None, 9.0, 9.0),
        ("A", 2, "PASS", 12.0, 3.0, 4.0),
        ("B", 0, "TIMEOUT", None, 1.0, 1.0),
    ]
    assert summarize(detail) == [("A", 3, 2 / 3, 2.0, 3.0, 11.0), ("B", 1, 0.0, None, None, None)]


def test_bench_paired_and_parallel_identical():
    from hptune.config import RunConfig
    cfg = RunConfig.from_dict(SHORT)
    d1, s1, _ = bench(cfg, ["FIXED_MARGIN", "REACTIVE_MARGIN"], 2, 0)
    d2, s2, _ = bench(cfg, ["FIXED_MARGIN", "REACTIVE_MARGIN"], 2, 0, workers=2)
    assert d1 == d2 and s1 == s2
    seeds = {st: [r[1] for r in d1 if r[0] == st] for st in ("FIXED_MARGIN", "REACTIVE_MARGIN")}
    assert seeds["FIXED_MARGIN"] == seeds["REACTIVE_MARGIN"] == [0, 1]


def test_tune_checkpoint_schedule(tmp_path):
    data = {"scenario": {"n_obstacles": 0, "time_limit": 3.0}}
    out = tmp_path / "t"
    rc = main(["tune", "--config", _cfg(tmp_path, data), "--iterations", "500", "--checkpoint-every", "100",
               "--eval-trials", "1", "--out", str(out)])
    assert rc == 0
    meta, rows = _read_csv(out / "tune_curve.csv")
    assert rows[0] == ["iteration", "alpha", "beta", "pass_rate"]
    assert [int(r[0]) for r in rows[1:]] == [100, 200, 300, 400, 500]
    for r in rows[1:]:
        assert 0.01 <= float(r[1]) <= 0.99 and 0.0 <= float(r[2]) <= 100.0
    _, trace = _read_csv(out / "tune_trace.csv")
    assert len(trace) - 1 == 500


def test_tune_zero_safety_weights_freeze_beta(tmp_path):
    data = {"scenario": {"n_obstacles": 2, "time_limit": 3.0}, "tuning": {"eta2": 0.0, "eta3": 0.0}}
    out = tmp_path / "t"
    assert main(["tune", "--config", _cfg(tmp_path, data), "--iterations", "10", "--checkpoint-every", "5",
                 "--eval-trials", "1", "--out", str(out)]) == 0
    _, trace = _read_csv(out / "tune_trace.csv")
    assert {r[2] for r in trace[1:]} == {"5.0"}


def test_tune_rejects_non_tuning_strategy(tmp_path):
    assert main(["tune", "--strategy", "FIXED_MARGIN", "--iterations", "5", "--out", str(tmp_path)]) == 1
    assert main(["tune", "--iterations", "0", "--out", str(tmp_path)]) == 1


def test_gradcheck_pass_and_report(tmp_path, capsys):
    assert main(["gradcheck", "--samples", "100", "--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert "PASS" in first
    rep = json.loads((tmp_path / "a" / "gradcheck.json").read_text())
    assert rep["max_rel_err"] < 1e-5 and rep["pass"]
    main(["gradcheck", "--samples", "100", "--out", str(tmp_path / "b")])
    assert capsys.readouterr().out == first
    assert (tmp_path / "a" / "gradcheck.json").read_bytes() == (tmp_path / "b" / "gradcheck.json").read_bytes()


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--samples", "0"]) == 1
    assert main(["gradcheck", "--samples", "5", "--threshold", "0"]) == 2


def test_train_seeds_disjoint_from_eval():
    assert TRAIN_SEED_OFFSET >= 10_000
