from __future__ import annotations

import json
from pathlib import Path

import pytest

from edgepress.cli import main
from edgepress.container import load_model
from edgepress.fixtures import toy_yolo
from edgepress.graph import validate
from edgepress.pipeline import (
    ConfigError, StageError, default_config_doc, load_config, parse_config, run_pipeline, sweep,
    write_calibration_set,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    write_calibration_set(toy_yolo(0), root / "calib", 24, seed=1)
    doc = default_config_doc("fixture:toy_yolo", "calib")
    doc["output_dir"] = "out"
    doc["hardware_profile"] = "toy-mcu"
    (root / "config.json").write_text(json.dumps(doc))
    return root


@pytest.fixture(scope="module")
def report(workspace):
    return run_pipeline(load_config(workspace / "config.json"))


def test_config_defaults():
    cfg = parse_config({"model": "m.epm"})
    assert cfg.pruning.r_target == 0.7 and cfg.pruning.k == 6
    assert cfg.quantization.sample_count == 300
    assert cfg.power.latency_s == 1.510


@pytest.mark.parametrize("bad", [
    {"pruning": {"r_target": 0.0}}, {"pruning": {"r_target": 1.0}}, {"pruning": {"k": 0}},
    {"pruning": {"metric": "accuracy"}}, {"quantization": {"method": "kl"}}, {"surprise": 1},
    {"schema_version": 2}, {"report_formats": ["pdf"]},
])
def test_config_rejections(bad):
    with pytest.raises(ConfigError):
        parse_config({"model": "m.epm", **bad})


def test_config_needs_model():
    with pytest.raises(ConfigError):
        parse_config({})


def test_relative_paths_resolve_against_config(workspace):
    cfg = load_config(workspace / "config.json")
    assert Path(cfg.quantization.calibration_dir) == workspace / "calib"
    assert cfg.model == "fixture:toy_yolo" and cfg.hardware_profile == "toy-mcu"


def test_pipeline_report(workspace, report):
    assert abs(report["retained_params"] - 0.30) <= 0.03
    ratio = report["pruned"]["weight_bytes"] / report["compressed"]["weight_bytes"]
    assert 3.5 <= ratio <= 4.0
    assert report["fits"] and [v["passed"] for v in report["fit"]] == [True, True]
    assert report["energy"]["active_bursts"] == 4
    assert report["summary_table"][0] == ["Metric", "Baseline", "Compressed", "HW constraints"]


def test_pipeline_artifacts_revalidate(workspace, report):
    out = workspace / "out"
    for name in ("report.json", "summary.txt", "prune_steps.json", "quant_error.json", "footprint.json",
                 "fit.json", "energy.json", "trace.csv", "quantized.epm", "pruned.epm"):
        assert (out / name).is_file(), name
    steps = sorted((out / "steps").glob("*.epm"))
    assert len(steps) == 7
    for p in steps + [out / "pruned.epm", out / "quantized.epm"]:
        assert validate(load_model(p)).ok
    text = (out / "report.json").read_text()
    assert str(workspace) not in text


def test_missing_calibration_dir_is_stage_error(workspace):
    cfg = load_config(workspace / "config.json")
    cfg.quantization.calibration_dir = str(workspace / "nowhere")
    cfg.output_dir = str(workspace / "out_missing")
    with pytest.raises(StageError) as ei:
        run_pipeline(cfg)
    assert ei.value.stage == "calibrate" and ei.value.exit_code == 12
    assert str(ei.value).startswith("[calibrate]")


def test_quantization_disabled_skips_calibration(workspace):
    cfg = load_config(workspace / "config.json")
    cfg.quantization.enabled = False
    cfg.quantization.calibration_dir = None
    cfg.pruning.enabled = False
    cfg.output_dir = str(workspace / "out_float")
    rep = run_pipeline(cfg)
    assert rep["retained_params"] == 1.0 and rep["quant_error"] is None


def test_sweep_k_reaches_thirty_percent(workspace):
    rows = sweep(load_config(workspace / "config.json"), "k", list(range(1, 13)))
    assert len(rows) == 12
    assert all(abs(r["retained_params_pct"] - 30.0) <= 3.0 for r in rows)


def test_sweep_r_target_macs_decrease(workspace):
    rows = sweep(load_config(workspace / "config.json"), "r_target", [0.3, 0.5, 0.7])
    macs = [r["macs"] for r in rows]
    assert macs[0] > macs[1] > macs[2]


def test_sweep_needs_values(workspace):
    with pytest.raises(ConfigError):
        sweep(load_config(workspace / "config.json"), "k", [])
    with pytest.raises(ConfigError):
        sweep(load_config(workspace / "config.json"), "width", [1])


def test_cosine_metric_tracks_degradation(workspace):
    cfg = load_config(workspace / "config.json")
    cfg.pruning.metric = "cosine"
    cfg.pruning.stop_threshold = 0.9
    rows = sweep(cfg, "r_target", [0.1, 0.7])
    assert 1.0 >= rows[0]["metric"] > rows[1]["metric"] > 0.0


def test_cli_gen_fixture_is_deterministic(tmp_path, capsys):
    assert main(["gen-fixture", "chain", "--seed", "42", "--out", str(tmp_path / "a.epm")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["kind"] == "chain" and out["seed"] == 42
    assert main(["gen-fixture", "chain", "--seed", "42", "--out", str(tmp_path / "b.epm")]) == 0
    assert (tmp_path / "a.epm").read_bytes() == (tmp_path / "b.epm").read_bytes()


def test_cli_verbs_end_to_end(tmp_path, capsys):
    model = tmp_path / "toy.epm"
    assert main(["gen-fixture", "toy_yolo", "--out", str(model), "--calib-dir", str(tmp_path / "calib"),
                 "--calib-count", "8"]) == 0
    assert main(["validate", str(model)]) == 0
    out = str(tmp_path / "o")
    assert main(["prune", str(model), "--out", out, "--k", "3"]) == 0
    pruned = str(tmp_path / "o" / "pruned.epm")
    assert main(["calibrate", pruned, "--calib-dir", str(tmp_path / "calib"), "--out", out]) == 0
    assert (tmp_path / "o" / "qparams.json").is_file()
    assert main(["quantize", pruned, "--qparams", str(tmp_path / "o" / "qparams.json"), "--out", out]) == 0
    capsys.readouterr()
    assert main(["account", str(tmp_path / "o" / "quantized.epm"), "--profile", "toy-mcu",
                 "--format", "table"]) == 0
    table = capsys.readouterr().out
    assert "flash" in table and "pass" in table
    assert main(["account", str(model), "--profile", "toy-mcu"]) == 1  # float toy exceeds 64 KB flash
    capsys.readouterr()
    assert main(["power", "--out", out]) == 0
    energy = json.loads(capsys.readouterr().out)
    assert energy["active_bursts"] == 4
    assert (tmp_path / "o" / "trace.csv").read_text().startswith("time_s,current_mA")


def test_cli_pipeline_and_sweep(workspace, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["pipeline", "--config", str(workspace / "config.json"), "--out", out, "--format", "table"]) == 0
    assert "Model size (Flash)" in capsys.readouterr().out
    assert main(["sweep", "--config", str(workspace / "config.json"), "--variable", "r_target",
                 "--values", "0.3,0.6", "--out", out]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["value"] for r in rows] == [0.3, 0.6]
    assert main(["sweep", "--config", str(workspace / "config.json"), "--variable", "k", "--values", ""]) == 2


def test_cli_error_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": "fixture:toy_yolo", "pruning": {"r_target": 0}}))
    assert main(["pipeline", "--config", str(bad)]) == 2
    doc = json.loads((workspace / "config.json").read_text())
    doc["quantization"]["calibration_dir"] = str(tmp_path / "missing")
    cfg = tmp_path / "nocalib.json"
    cfg.write_text(json.dumps(doc))
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 12
    assert "[calibrate]" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "absent.epm")]) == 1
    with pytest.raises(SystemExit) as ei:
        main(["gen-fixture", "mystery"])
    assert ei.value.code == 2


def test_cli_validate_reports_issues(tmp_path, capsys):
    from edgepress.container import serialize_model
    from edgepress.fixtures import gen_fixture
    g = gen_fixture("chain", 0)
    (tmp_path / "g.epm").write_bytes(serialize_model(g))
    assert main(["validate", str(tmp_path / "g.epm")]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True


def test_pipeline_outputs_are_deterministic(workspace, tmp_path):
    cfg_a = load_config(workspace / "config.json")
    cfg_b = load_config(workspace / "config.json")
    cfg_a.output_dir, cfg_b.output_dir = str(tmp_path / "a"), str(tmp_path / "b")
    run_pipeline(cfg_a)
    run_pipeline(cfg_b)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
