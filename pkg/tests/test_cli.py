import json
import subprocess
import sys

import pandas as pd
import pytest
import yaml

from mixedkoop.cli import main
from mixedkoop.dataio import manifest_hash
from mixedkoop.koopman import load_checkpoint
from mixedkoop.sim import ClosedLoopController

TINY = {
    "seed": 0,
    "data": {"n_runs": 1, "n_vehicles": 10, "duration": 40.0, "stride": 10},
    "model": {"context": 4, "horizon": 15, "epochs": 1},
    "scenario": {"n_vehicles": 4, "penetration": 0.25, "duration": 3.0},
    "mpc": {"horizon": 5},
}


def _config(tmp_path, extra=None, name="run.yaml"):
    cfg = json.loads(json.dumps(TINY))
    for key, val in (extra or {}).items():
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    cfg.setdefault("out", str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_gen_data_split_and_determinism(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "samples: train=" in out
    meta = json.loads((tmp_path / "out" / "dataset" / "split.json").read_text())
    n = sum(meta["sizes"].values())
    assert meta["sizes"]["train"] == round(0.7 * n) and meta["sizes"]["val"] == round(0.1 * n)
    first = manifest_hash(tmp_path / "out" / "dataset")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert manifest_hash(tmp_path / "again" / "dataset") == first
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "other"), "--seed", "1"]) == 0
    assert manifest_hash(tmp_path / "other" / "dataset") != first


def test_missing_input_file_is_data_error(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    cfg = _config(tmp_path, {"data.source": "csv", "data.csv_path": str(missing)})
    assert main(["gen-data", "--config", str(cfg)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "absent.yaml")]) == 1
    cfg = _config(tmp_path, {"model.colour": "blue"})
    assert main(["gen-data", "--config", str(cfg)]) == 1
    assert "colour" in capsys.readouterr().err
    cfg = _config(tmp_path, {"constraints.h_min": 500.0}, "bad.yaml")
    assert main(["simulate", "--config", str(cfg)]) == 1


def test_train_writes_checkpoint_and_reports(trained, capsys):
    tmp, cfg = trained
    ckpt = tmp / "out" / "model.ckpt"
    manifest, _ = load_checkpoint(ckpt)
    assert manifest["variant"] == "adapkoopnet" and manifest["epoch"] == 1
    report = json.loads((tmp / "out" / "train_metrics.json").read_text())
    assert report["val_v_rmse"] > 0


def test_train_resume_continues_epochs(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert main(["train", "--config", str(cfg), "--resume"]) == 0
    out = capsys.readouterr().out
    assert "resuming from epoch 1" in out and "trained epochs: 2" in out
    assert load_checkpoint(tmp_path / "out" / "model.ckpt")[0]["epoch"] == 2
    assert main(["train", "--config", str(cfg), "--resume", "--out", str(tmp_path / "empty")]) == 2


def test_train_edmd_variant(tmp_path, capsys):
    cfg = _config(tmp_path, {"model.edmd_centers": 8})
    assert main(["train", "--config", str(cfg), "--variant", "edmd"]) == 0
    assert "validation velocity RMSE" in capsys.readouterr().out
    manifest, tensors = load_checkpoint(tmp_path / "out" / "model.ckpt")
    assert manifest["encoder"]["kind"] == "rbf" and tensors["rbf.centers"].shape == (8, 2)


def test_eval_table_schema(trained, capsys):
    tmp, cfg = trained
    assert main(["eval", "--config", str(cfg)]) == 0
    table = pd.read_csv(tmp / "out" / "eval_rmse.csv", dtype={"horizon_s": str})
    assert list(table.columns) == ["horizon_s", "v_rmse", "h_rmse"]
    assert list(table.horizon_s) == ["0.6", "1.2", "1.8", "average"]
    base = pd.read_csv(tmp / "out" / "eval_rmse_baseline.csv")
    assert list(base.columns) == ["horizon_s", "v_rmse", "h_rmse"]


def test_simulate_artifacts_and_idempotence(trained, capsys):
    tmp, cfg = trained
    assert main(["simulate", "--config", str(cfg)]) == 0
    out = tmp / "out"
    for name in ("simlog.csv", "metrics.json", "plots/time_space.svg"):
        assert (out / name).exists()
    first = pd.read_csv(out / "simlog.csv").drop(columns="solve_time_s")
    svg = (out / "plots" / "velocity.svg").read_bytes()
    assert main(["simulate", "--config", str(cfg)]) == 0
    pd.testing.assert_frame_equal(pd.read_csv(out / "simlog.csv").drop(columns="solve_time_s"), first)
    assert (out / "plots" / "velocity.svg").read_bytes() == svg


def test_simulate_collision_exits_numeric(trained, monkeypatch, capsys):
    tmp, cfg = trained
    monkeypatch.setattr(ClosedLoopController, "__call__", lambda self, world, k: {1: 6.0})
    crash = _config(tmp, {"out": str(tmp / "crash"), "model.checkpoint": str(tmp / "out" / "model.ckpt"),
                          "scenario.duration": 60.0, "scenario.placement": "front"}, "crash.yaml")
    code = main(["simulate", "--config", str(crash)])
    assert code == 3 and "collision" in capsys.readouterr().err.lower()
    assert (tmp / "crash" / "simlog.csv").exists()


def test_sweep_rows_and_invalid_axis(trained, capsys):
    tmp, cfg = trained
    assert main(["sweep", "--config", str(cfg), "--axis", "penetration", "--values", "0", "0.1", "0.2"]) == 0
    table = pd.read_csv(tmp / "out" / "sweep_penetration.csv")
    assert len(table) == 3
    capsys.readouterr()
    assert main(["sweep", "--config", str(cfg), "--axis", "speed", "--values", "1"]) == 1
    err = capsys.readouterr().err
    for axis in ("penetration", "placement", "controller_count", "comm_mode"):
        assert axis in err


def test_inspect_dumps_manifest_and_spectrum(trained, capsys):
    tmp, cfg = trained
    assert main(["inspect", str(tmp / "out" / "model.ckpt")]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["manifest"]["variant"] == "adapkoopnet"
    assert len(payload["spectrum"]["eigenvalues"]) == payload["manifest"]["config"]["d_model"]


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mixedkoop.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
