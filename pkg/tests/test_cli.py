import csv
import json
import subprocess
import sys

import pytest

from bpolab.bpo import LOG_COLUMNS
from bpolab.cli import DEFAULTS, content_hash, main, resolve_config

HARVEST_REF = (2.305361827867263, 2.5944078521922243)


def _config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["dance"]) == 2
    assert main(["baseline", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "a")]) == 2
    assert main(["baseline", "--config", _config(tmp_path, {"env": "cartpole"}), "--out", str(tmp_path / "b")]) == 2
    assert main(["baseline", "--config", _config(tmp_path, {"episods": 3}), "--out", str(tmp_path / "c")]) == 2
    assert main(["train", "--config", _config(tmp_path, {"policy_lr": -1}), "--out", str(tmp_path / "d")]) == 2
    assert main(["baseline", "--workers", "0", "--out", str(tmp_path / "e")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_version_exits_0(capsys):
    assert main(["--version"]) == 0
    assert "bpolab" in capsys.readouterr().out


def test_baseline_writes_run_dir_and_refuses_overwrite(tmp_path):
    out = tmp_path / "run"
    cfg = _config(tmp_path, {"episodes": 10})
    assert main(["baseline", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    resolved = json.loads((out / "config.json").read_text())
    run = json.loads((out / "run.json").read_text())
    assert resolved["seed"] == 3 and resolved["episodes"] == 10
    assert run["content_hash"] == content_hash("baseline", resolved)
    assert json.loads((out / "baseline.json").read_text())["j_rand"] > 0
    assert main(["baseline", "--config", cfg, "--out", str(out)]) == 2
    assert main(["baseline", "--config", cfg, "--out", str(out), "--force"]) == 0


def test_content_hash_is_stable_and_sensitive():
    cfg = resolve_config("baseline", {}, None)
    assert content_hash("baseline", cfg) == content_hash("baseline", dict(reversed(cfg.items())))
    assert content_hash("baseline", cfg) != content_hash("baseline", {**cfg, "seed": 1})
    assert len(content_hash("baseline", cfg)) == 40


def test_resolve_config_defaults_and_seed():
    cfg = resolve_config("oracle", {"horizon": 30}, 7)
    assert cfg == {**DEFAULTS["oracle"], "horizon": 30, "seed": 7}
    assert resolve_config("train", {"env": "cancer", "horizon": 20}, None)["env"] == "cancer"


def test_oracle_beats_random_on_harvest(tmp_path):
    out = tmp_path / "oracle"
    assert main(["oracle", "--out", str(out)]) == 0
    ref = json.loads((out / "reference.json").read_text())
    assert ref["j_star"] > ref["j_rand"]
    assert ref["j_rand"] == pytest.approx(HARVEST_REF[0], rel=1e-9)
    assert ref["j_star"] == pytest.approx(HARVEST_REF[1], rel=1e-6)
    rows = list(csv.reader((out / "oracle_trajectory.csv").open()))
    assert rows[0] == ["t", "s0", "a0", "r"] and len(rows) == 21


def test_short_train_writes_log_schema(tmp_path):
    out = tmp_path / "train"
    cfg = _config(tmp_path, {"env": "harvest", "horizon": 6, "total_env_steps": 40, "warmup_steps": 10,
                             "dynamics_batch_size": 4, "policy_batch_size": 4, "policy_replay_ratio": 1,
                             "checkpoint_every": 4, "model_params": {"d_model": 12, "d_ff": 8}})
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "log.csv").open()))
    assert list(rows[0]) == LOG_COLUMNS and len(rows) == 8
    assert (out / "checkpoints").is_dir()
    assert set(json.loads((out / "summary.json").read_text())) >= {"final_normalized", "best_normalized"}


def test_fit_offline_and_landscape_from_checkpoint(tmp_path):
    cfg = _config(tmp_path, {"horizon": 8, "n_transitions": 700, "n_steps": 5, "n_points": 11,
                             "models": [{"family": "markovian", "hidden": [8]}]})
    out = tmp_path / "fit"
    assert main(["fit-offline", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["markovian"]["landscape_mse"] >= 0
    header = next(csv.reader((out / "landscape.csv").open()))
    assert header == ["action", "true", "markovian"]

    cfg2 = _config(tmp_path, {"horizon": 8, "n_points": 11, "checkpoints": {"m": str(out / "models" / "markovian")}},
                   "cfg2.json")
    out2 = tmp_path / "land"
    assert main(["sweep-landscape", "--config", cfg2, "--out", str(out2)]) == 0
    with (out / "landscape.csv").open() as a, (out2 / "landscape.csv").open() as b:
        assert [r[2] for r in csv.reader(a)][1:] == [r[2] for r in csv.reader(b)][1:]
    bad = _config(tmp_path, {"checkpoints": {"m": str(tmp_path / "missing")}}, "bad.json")
    assert main(["sweep-landscape", "--config", bad, "--out", str(tmp_path / "x")]) == 2


def test_sweep_gradnorm_true_dynamics(tmp_path):
    cfg = _config(tmp_path, {"horizons": [5, 10], "n_actions": 4})
    out = tmp_path / "gn"
    assert main(["sweep-gradnorm", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.reader((out / "gradnorm.csv").open()))
    assert rows[0] == ["horizon", "true"] and len(rows) == 3


def test_verify_small_config_passes(tmp_path):
    cfg = _config(tmp_path, {"n_gradcheck": 3, "n_f_rnn_seeds": 2, "n_bound_configs": 8, "n_attention_seeds": 2})
    out = tmp_path / "verify"
    proc = subprocess.run([sys.executable, "-m", "bpolab.cli", "verify", "--config", cfg, "--out", str(out)],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) == 7 and all(ln.startswith("PASS") for ln in lines)
    assert json.loads((out / "verify.json").read_text())["passed"]
