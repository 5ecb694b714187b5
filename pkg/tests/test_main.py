from pathlib import Path

import pandas as pd
import pytest
import yaml

from experiment_config import load_costs
from main import main
from report_exporter import REPORT_COLUMNS

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
SINGLE_NODE = str(CONFIG_DIR / "single_node.cfg")


def _write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def _train_config(tmp_path, **dataset):
    return _write_yaml(tmp_path / "train.cfg", {
        "trainer": {
            "dataset": dataset or {"synthetic": {"num_users": 40, "num_items": 30, "num_interactions": 800}},
            "model": {"dim": 4},
            "hyper": {"learning_rate": 0.5, "batch_size": 32, "steps": 20},
            "eval": {"k": 10, "negatives": 10},
            "loss_every": 5,
            "variants": [
                {"name": "dense", "data_degree": 2},
                {"name": "onebit", "data_degree": 2, "compressor": {"kind": "onebit"}},
            ],
        },
    })


def test_simulate_writes_reports(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "--config", SINGLE_NODE, "--out", str(out)]) == 0
    report = pd.read_csv(out / "report.csv")
    assert list(report.columns) == REPORT_COLUMNS
    assert len(report) == 4
    assert (out / "report.md").exists()
    assert not (out / "report.xlsx").exists()
    timeline = pd.read_csv(out / "timeline.csv")
    assert list(timeline.columns) == ["strategy", "iter", "device", "event_kind", "start_s", "end_s"]
    assert "[3/3]" in capsys.readouterr().out


def test_simulate_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--config", SINGLE_NODE, "--out", str(tmp_path / name)]) == 0
    for artifact in ("report.csv", "report.md", "timeline.csv"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_simulate_reports_cache_contents(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    data = yaml.safe_load((CONFIG_DIR / "single_node.cfg").read_text(encoding="utf-8"))
    data["simulation"]["cache"] = True
    config = _write_yaml(tmp_path / "cached.cfg", data)
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "first")]) == 0
    assert "Cache info: 0 rows simulated before" in capsys.readouterr().out
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "second")]) == 0
    out = capsys.readouterr().out
    assert "Cache info: 4 rows simulated before" in out
    assert "(cached)" in out


def test_simulate_excel_only(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--config", SINGLE_NODE, "--out", str(out), "--format", "xlsx"]) == 0
    assert (out / "report.xlsx").exists()
    assert not (out / "report.csv").exists()


def test_simulate_with_micro_batch_tuning(tmp_path, capsys):
    assert main(["simulate", "--config", SINGLE_NODE, "--out", str(tmp_path), "--tune-micro-batches"]) == 0
    assert "model_parallel: M=" in capsys.readouterr().out


def test_placement_violation_exits_with_config_error(tmp_path, capsys):
    config = _write_yaml(tmp_path / "bad.cfg", {
        "costs": {"compute_time_per_sample_per_device": 1e-3},
        "strategies": [{"name": "too_big", "global_batch": 64, "data_degree": 16}],
    })
    assert main(["simulate", "--config", config, "--out", str(tmp_path)]) == 1
    assert "data_degree*tensor_degree*pipeline_stages" in capsys.readouterr().err


def test_zero_stage_fraction_exits_with_config_error(tmp_path, capsys):
    config = _write_yaml(tmp_path / "bad.cfg", {
        "costs": {"compute_time_per_sample_per_device": 1e-3, "pipeline_stage_cost_split": [1.0, 0.0]},
        "strategies": [{"name": "pp", "global_batch": 64, "pipeline_stages": 2, "micro_batches": 2}],
    })
    assert main(["simulate", "--config", config, "--out", str(tmp_path)]) == 1
    assert "pipeline_stage_cost_split" in capsys.readouterr().err


def test_unknown_key_exits_with_config_error(tmp_path, capsys):
    config = _write_yaml(tmp_path / "bad.cfg", {"costs": {"compute_time_per_sample_per_device": 1e-3}, "typo": 1})
    assert main(["simulate", "--config", config, "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_train_and_evaluate(tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--config", _train_config(tmp_path), "--out", str(out)]) == 0
    curve = pd.read_csv(out / "loss_curve.csv")
    assert curve.groupby("variant")["step"].apply(list).to_dict() == {
        "dense": [5, 10, 15, 20], "onebit": [5, 10, 15, 20]
    }
    evals = pd.read_csv(out / "eval.csv")
    assert evals["variant"].tolist() == ["dense", "onebit"]
    assert (out / "model_dense.npz").exists()

    trained = (out / "eval.csv").read_bytes()
    assert main(["train", "--config", _train_config(tmp_path), "--out", str(out), "--eval-only"]) == 0
    assert (out / "eval.csv").read_bytes() == trained


def test_seed_controls_training(tmp_path):
    config = _train_config(tmp_path)
    runs = {}
    for name, extra in (("default", []), ("explicit", ["--seed", "42"]), ("other", ["--seed", "7"])):
        out = tmp_path / name
        assert main(["train", "--config", config, "--out", str(out), *extra]) == 0
        runs[name] = (out / "loss_curve.csv").read_bytes()
    assert runs["default"] == runs["explicit"]
    assert runs["default"] != runs["other"]


def test_eval_only_needs_saved_models(tmp_path, capsys):
    assert main(["train", "--config", _train_config(tmp_path), "--out", str(tmp_path / "x"), "--eval-only"]) == 2
    assert "not found" in capsys.readouterr().err


def test_missing_dataset_exits_with_runtime_error(tmp_path, capsys):
    config = _train_config(tmp_path, path="nowhere.csv")
    assert main(["train", "--config", config, "--out", str(tmp_path / "out")]) == 2
    assert "nowhere.csv" in capsys.readouterr().err


def test_train_reads_csv_relative_to_config(tmp_path):
    lines = ["user_id,item_id,timestamp"] + [f"{i % 7},{i % 11},{1000 + i}" for i in range(200)]
    (tmp_path / "events.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    config = _train_config(tmp_path, path="events.csv")
    assert main(["train", "--config", config, "--out", str(tmp_path / "out")]) == 0


def test_train_needs_a_trainer_section(tmp_path):
    assert main(["train", "--config", SINGLE_NODE, "--out", str(tmp_path)]) == 1


def test_calibrate_then_simulate_with_fitted_costs(tmp_path):
    fit = tmp_path / "fit"
    assert main(["calibrate", "--config", SINGLE_NODE, "--out", str(fit)]) == 0
    costs = load_costs(fit / "calibrated_costs.yaml")
    assert costs == load_costs(CONFIG_DIR / "single_node_costs.yaml")
    residuals = pd.read_csv(fit / "calibration_residuals.csv")
    assert residuals["anchor"].tolist() == ["baseline"]

    refit = tmp_path / "refit"
    assert main(["calibrate", "--config", SINGLE_NODE, "--out", str(refit)]) == 0
    assert (refit / "calibrated_costs.yaml").read_bytes() == (fit / "calibrated_costs.yaml").read_bytes()

    inline, fitted = tmp_path / "inline", tmp_path / "fitted"
    assert main(["simulate", "--config", SINGLE_NODE, "--out", str(inline)]) == 0
    assert main(["simulate", "--config", SINGLE_NODE, "--out", str(fitted), "--costs", str(fit / "calibrated_costs.yaml")]) == 0
    assert (inline / "report.csv").read_bytes() == (fitted / "report.csv").read_bytes()


def test_calibrate_without_baseline_anchor(tmp_path, capsys):
    data = yaml.safe_load((CONFIG_DIR / "single_node.cfg").read_text(encoding="utf-8"))
    data["calibration"]["anchors"] = [{"strategy": "data_parallel", "throughput": 3400.0}]
    config = _write_yaml(tmp_path / "cal.cfg", data)
    assert main(["calibrate", "--config", config, "--out", str(tmp_path)]) == 2
    assert "baseline" in capsys.readouterr().err


def test_calibrate_reports_residuals_over_tolerance(tmp_path, capsys):
    data = yaml.safe_load((CONFIG_DIR / "single_node.cfg").read_text(encoding="utf-8"))
    data["calibration"]["anchors"] = [
        {"strategy": "baseline", "throughput": 1000.0},
        {"strategy": "data_parallel", "throughput": 20000.0},
    ]
    config = _write_yaml(tmp_path / "cal.cfg", data)
    assert main(["calibrate", "--config", config, "--out", str(tmp_path)]) == 2
    assert "exceeds tolerance" in capsys.readouterr().err
    assert (tmp_path / "calibration_residuals.csv").exists()


def test_report_combines_runs(tmp_path):
    run = tmp_path / "single_node"
    assert main(["simulate", "--config", SINGLE_NODE, "--out", str(run)]) == 0
    assert main(["report", str(run), "--out", str(tmp_path / "combined")]) == 0
    text = (tmp_path / "combined" / "combined_report.md").read_text(encoding="utf-8")
    assert "holds" in text


def test_report_on_empty_run_directory(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path)]) == 2
    assert "report.csv" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["bogus"])
