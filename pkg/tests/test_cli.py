"""End-to-end CLI runs on the tiny smoke preset."""

import csv
import json
from pathlib import Path

import pytest

from helpers_cli import read_jsonl_stripped, run_cli, smoke_config
from kcgg.harness import MetricsReport


def test_generate_data_default_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1, "output_dir": "deep/new/dir"}))
    assert run_cli("generate-data", cfg) == 0
    from kcgg.demos import load_dataset

    assert len(load_dataset(tmp_path / "deep/new/dir/demos.kcggdat")) == 100


def test_bad_arm_spec_exits_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1, "arm": {"link_lengths": [0.55, 0.0, 0.44]}}))
    assert run_cli("generate-data", cfg) == 1


def test_unknown_key_exits_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1, "oops": 1}))
    assert run_cli("train", cfg) == 1


def test_missing_inputs_exit_one(tmp_path):
    cfg = smoke_config(tmp_path)
    assert run_cli("train", cfg) == 1
    assert run_cli("evaluate", cfg) == 1


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("evaluate", None)
    assert exc.value.code == 1


def test_bad_log_level_exits_one(tmp_path, monkeypatch):
    monkeypatch.setenv("KCGG_LOG_LEVEL", "loud")
    assert run_cli("generate-data", smoke_config(tmp_path)) == 1


def test_rejection_abort_exits_two(tmp_path):
    cfg = smoke_config(tmp_path, arm={"link_lengths": [0.1, 0.1, 0.1]}, env={"min_reach": 0.0, "reach_margin": 0.0})
    assert run_cli("generate-data", cfg) == 2


def test_full_smoke_pipeline(tmp_path):
    cfg = smoke_config(tmp_path)
    out = tmp_path / "run"
    for cmd in ("generate-data", "train", "evaluate", "sweep"):
        assert run_cli(cmd, cfg) == 0, cmd
    rows = list(csv.reader((out / "loss.csv").open()))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 21
    report = MetricsReport.read(out / "metrics.csv")
    assert [r.method for r in report.rows] == ["unconstrained_no_filter", "unconstrained", "projection", "kcgg"]
    assert MetricsReport.from_csv(report.to_csv()) == report
    sweep = MetricsReport.read(out / "sweep.csv")
    assert [(r.method, r.budget_ms) for r in sweep.rows] == [
        (m, b) for m in ("projection", "kcgg") for b in (20.0, 60.0)
    ]
    assert all(r.ms_per_step > 0 for r in sweep.rows)
    diags = read_jsonl_stripped(out / "diagnostics.jsonl")
    assert len(diags) == 4 * 6
    assert {d["method"] for d in diags} == {"unconstrained_no_filter", "unconstrained", "projection", "kcgg"}


def test_seed_and_out_overrides(tmp_path):
    cfg = smoke_config(tmp_path)
    assert run_cli("generate-data", cfg, "--seed", "5", "--out", str(tmp_path / "other")) == 0
    assert (tmp_path / "other" / "demos.kcggdat").exists()
    assert not (tmp_path / "run" / "demos.kcggdat").exists()


def test_parallel_evaluation_matches_serial(tmp_path):
    cfg = smoke_config(tmp_path)
    for cmd in ("generate-data", "train"):
        assert run_cli(cmd, cfg) == 0
    assert run_cli("evaluate", cfg, "--out", str(tmp_path / "run")) == 0
    serial = read_jsonl_stripped(tmp_path / "run" / "diagnostics.jsonl")
    metrics = MetricsReport.read(tmp_path / "run" / "metrics.csv")
    assert run_cli("evaluate", cfg, "--parallel", "2") == 0
    assert read_jsonl_stripped(tmp_path / "run" / "diagnostics.jsonl") == serial
    again = MetricsReport.read(tmp_path / "run" / "metrics.csv")
    assert [r.block_rate for r in again.rows] == [r.block_rate for r in metrics.rows]


def test_traces_recorded(tmp_path):
    cfg = smoke_config(tmp_path, evaluation={"n_episodes": 2, "record_traces": True,
                                              "methods": [{"name": "kcgg", "method": "kcgg", "guidance_scale": 30.0}],
                                              "sweep_methods": ["kcgg"], "ms_per_step": {"kcgg": 3.4}})
    for cmd in ("generate-data", "train", "evaluate"):
        assert run_cli(cmd, cfg) == 0
    assert len(list(Path(tmp_path / "run" / "traces").glob("kcgg_*.jsonl"))) == 2


def test_rerun_is_bitwise_identical_outside_timing(tmp_path):
    cfg = smoke_config(tmp_path)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("generate-data", "train", "evaluate", "sweep"):
            assert run_cli(cmd, cfg, "--out", str(out)) == 0
        runs.append(out)
    a, b = runs
    for name in ("demos.kcggdat", "model.kcggnet", "loss.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert read_jsonl_stripped(a / "diagnostics.jsonl") == read_jsonl_stripped(b / "diagnostics.jsonl")
    for name in ("metrics.csv", "sweep.csv"):
        ra, rb = MetricsReport.read(a / name).rows, MetricsReport.read(b / name).rows
        strip = lambda r: {k: v for k, v in vars(r).items() if k != "ms_per_step"}
        assert [strip(r) for r in ra] == [strip(r) for r in rb]
