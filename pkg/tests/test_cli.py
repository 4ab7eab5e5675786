import json

import numpy as np
import pytest

from deeponet_capacity import cli
from deeponet_capacity.network import init_deeponet, load_checkpoint, save_checkpoint


def run(tmp_path, *argv):
    return cli.run([argv[0], "--out", str(tmp_path), *argv[1:]])


def test_generate_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(d, "generate", "--task", "pendulum", "--m", "8", "--seed", "4", "--data.steps", "100") == 0
    name = "pendulum_m8_s4"
    assert (a / f"{name}.jsonl").read_bytes() == (b / f"{name}.jsonl").read_bytes()
    echo = json.loads((a / f"{name}.config.json").read_text())
    assert echo["command"] == "generate" and echo["config"]["data.steps"] == 100


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.run([]) == 1
    assert run(tmp_path, "generate", "--bogus", "1") == 1
    assert run(tmp_path, "generate", "--m", "notanint") == 1
    assert run(tmp_path, "generate", "--task", "heat") == 1
    assert run(tmp_path, "capacity") == 1
    assert run(tmp_path, "verify", "--suite", "nope") == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_keys_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train.lrr": 0.1}))
    assert run(tmp_path, "train", "--config", str(cfg)) == 1
    cfg.write_text(json.dumps({"m": 5, "task": "antiderivative"}))
    assert run(tmp_path, "generate", "--config", str(cfg), "--m", "3") == 0
    assert (tmp_path / "antiderivative_m3_s0.jsonl").exists()


def test_capacity_of_zero_model(tmp_path):
    m = init_deeponet([3, 4, 2], [2, 4, 2], "abs", np.random.default_rng(0))
    zero = m.with_layers([np.zeros_like(w) for w in m.branch.layers], m.trunk.layers)
    save_checkpoint(zero, tmp_path / "z.ckpt.json")
    assert run(tmp_path, "capacity", "--model", str(tmp_path / "z.ckpt.json")) == 0
    rep = json.loads((tmp_path / "z.capacity.json").read_text())
    assert rep["composite"] == 0.0
    assert (tmp_path / "z.capacity.csv").read_text().splitlines()[0] == "depth,c_outer,composite,lipschitz_product"


def test_bad_checkpoint_exit_one(tmp_path, capsys):
    p = tmp_path / "bad.ckpt.json"
    p.write_text("{not json")
    assert run(tmp_path, "capacity", "--model", str(p)) == 1
    assert "bad.ckpt.json" in capsys.readouterr().err


def test_verify_exit_codes(tmp_path, capsys):
    assert run(tmp_path, "verify", "--suite", "contraction", "--contraction_trials", "5000") == 0
    assert run(tmp_path, "verify", "--suite", "contraction", "--contraction_trials", "5000", "--contraction_L", "0.5", "--name", "broken") == 2
    body = json.loads((tmp_path / "broken.json").read_text())
    assert body["violations"] > 0 and body["failed"] == ["contraction_abs", "contraction_biased_abs"]
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" in out


def test_pipeline_and_report_idempotent(tmp_path):
    assert run(tmp_path, "generate", "--task", "antiderivative", "--m", "24", "--name", "tr", "--data.sensors", "6") == 0
    assert run(tmp_path, "generate", "--task", "antiderivative", "--m", "24", "--seed", "1", "--name", "te", "--data.sensors", "6") == 0
    args = ["train", "--train", str(tmp_path / "tr.jsonl"), "--test", str(tmp_path / "te.jsonl"), "--model.width", "6", "--model.p", "4", "--train.epochs", "3", "--train.batch_size", "8"]
    assert run(tmp_path, *args, "--name", "r1") == 0
    assert run(tmp_path, *args, "--name", "r2") == 0
    assert (tmp_path / "r1.ckpt.json").read_bytes() == (tmp_path / "r2.ckpt.json").read_bytes()
    assert (tmp_path / "r1.history.csv").read_text().count("\n") == 4
    gap = json.loads((tmp_path / "r1.gap.json").read_text())
    assert gap["gap_bound_with_factor"] > 0
    load_checkpoint(tmp_path / "r1.ckpt.json")
    assert run(tmp_path, "capacity", "--model", str(tmp_path / "r1.ckpt.json")) == 0
    assert run(tmp_path, "bounds", "--model", str(tmp_path / "r1.ckpt.json"), "--data", str(tmp_path / "tr.jsonl")) == 0
    b = json.loads((tmp_path / "r1.bounds.json").read_text())
    # the empirical bound uses the sample norms, the average one their maxima
    assert 0 < b["rademacher_empirical"] <= b["rademacher_average"] * (1 + 1e-12)
    inputs = ",".join(str(tmp_path / f) for f in ("r1.gap.json", "r1.history.csv", "r1.capacity.json", "r1.bounds.json"))
    assert run(tmp_path, "report", "--inputs", inputs) == 0
    first = (tmp_path / "report.md").read_bytes(), (tmp_path / "report.csv").read_bytes()
    assert run(tmp_path, "report", "--inputs", inputs) == 0
    assert first == ((tmp_path / "report.md").read_bytes(), (tmp_path / "report.csv").read_bytes())
    assert b"## gap" in first[0] and b"## bounds" in first[0]


def test_train_mismatched_dims(tmp_path):
    assert run(tmp_path, "generate", "--task", "antiderivative", "--m", "4", "--name", "a", "--data.sensors", "6") == 0
    assert run(tmp_path, "generate", "--task", "antiderivative", "--m", "4", "--name", "b", "--data.sensors", "5") == 0
    assert run(tmp_path, "train", "--train", str(tmp_path / "a.jsonl"), "--test", str(tmp_path / "b.jsonl")) == 1
