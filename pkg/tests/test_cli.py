import json
import subprocess
import sys

import numpy as np
import pytest

from instancegm.cli import main
from instancegm.config import PROVENANCE, TrainConfig
from instancegm.datasets import load_dataset

TINY = {"epochs": 2, "warmup_epochs": 1, "batch_size": 32, "rampup": 1}


def call(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_writes_manifest(tmp_path, capsys):
    code, out, _ = call(capsys, "synth", "--classes", 4, "--per-class", 100, "--side", 16,
                        "--seed", 7, "--out", tmp_path / "d")
    assert code == 0
    manifest = json.loads((tmp_path / "d/manifest.json").read_text())
    assert manifest["num_examples"] == 400
    assert json.loads(out)["num_examples"] == 400


def test_noise_rate_recount(tmp_path, capsys):
    call(capsys, "synth", "--per-class", 100, "--seed", 7, "--out", tmp_path / "d")
    code, out, _ = call(capsys, "noise", "--kind", "idn", "--rate", 0.4, "--seed", 1,
                        "--in", tmp_path / "d", "--out", tmp_path / "dn")
    assert code == 0
    clean = load_dataset(tmp_path / "d").noisy_labels
    noisy = load_dataset(tmp_path / "dn").noisy_labels
    assert abs(np.mean(clean != noisy) - 0.4) <= 0.02
    # the source directory is left alone
    assert np.array_equal(load_dataset(tmp_path / "d").noisy_labels, clean)


def test_train_twice_identical_metrics_and_eval_report(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("INSTANCEGM_DETERMINISTIC", "1")
    call(capsys, "synth", "--per-class", 12, "--seed", 3, "--out", tmp_path / "d")
    call(capsys, "synth", "--per-class", 5, "--seed", 4, "--out", tmp_path / "t")
    call(capsys, "noise", "--kind", "symmetric", "--rate", 0.2, "--in", tmp_path / "d",
         "--out", tmp_path / "dn")
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    for run in ("r1", "r2"):
        code, out, err = call(capsys, "train", "--config", tmp_path / "c.json", "--data", tmp_path / "dn",
                              "--test", tmp_path / "t", "--out", tmp_path / run)
        assert code == 0, err
    assert (tmp_path / "r1/metrics.jsonl").read_bytes() == (tmp_path / "r2/metrics.jsonl").read_bytes()
    resolved = TrainConfig.load(tmp_path / "r1/config.json")
    assert resolved.epochs == 2 and resolved.alpha == TrainConfig().alpha

    code, out, _ = call(capsys, "eval", "--run", tmp_path / "r1", "--data", tmp_path / "t")
    assert code == 0
    last = json.loads((tmp_path / "r1/metrics.jsonl").read_text().splitlines()[-1])
    assert json.loads(out)["test_accuracy"] == last["test_accuracy"]

    code, out, _ = call(capsys, "report", tmp_path / "r1", tmp_path / "r2", "--out", tmp_path / "rep",
                        "--plots")
    assert code == 0
    rows = (tmp_path / "rep/report.csv").read_text().splitlines()
    assert len(rows) == 3
    assert (tmp_path / "rep/accuracy.png").stat().st_size > 0
    assert (tmp_path / "rep/w_hist_r1.png").exists()


def test_flags_override_config_file(tmp_path, capsys):
    call(capsys, "synth", "--per-class", 8, "--out", tmp_path / "d")
    (tmp_path / "c.json").write_text(json.dumps({**TINY, "alpha": 2.0}))
    code, _, err = call(capsys, "train", "--config", tmp_path / "c.json", "--data", tmp_path / "d",
                        "--out", tmp_path / "r", "--alpha", 0.75, "--epochs", 1,
                        "--use-cb-recon", "false")
    assert code == 0, err
    cfg = TrainConfig.load(tmp_path / "r/config.json")
    assert (cfg.alpha, cfg.epochs, cfg.use_cb_recon) == (0.75, 1, False)


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    defaults = TrainConfig()
    for key in PROVENANCE:
        flag = f"--{key.replace('_', '-')}"
        assert flag in text
        assert f"default {getattr(defaults, key)!r}" in text
    assert "[PAPER]" in text and "[desk-scale]" in text


@pytest.mark.parametrize("argv", [
    ["noise", "--kind", "idn", "--rate", "0.4", "--in", "/no/such/dir", "--out", "x"],
    ["train", "--data", "/no/such/dir", "--out", "x"],
    ["frobnicate"],
    ["synth", "--classes", "4"],
    ["noise", "--kind", "sideways", "--rate", "0.1", "--in", ".", "--out", "x"],
])
def test_usage_errors_exit_2_with_one_json_line(capsys, argv):
    code, _, err = call(capsys, *argv)
    assert code == 2
    lines = err.strip().splitlines()
    assert len(lines) == 1
    payload = json.loads(lines[0])
    assert set(payload) == {"error", "message"}


def test_bad_config_file_exit_2(tmp_path, capsys):
    call(capsys, "synth", "--per-class", 4, "--out", tmp_path / "d")
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 1, "not_a_key": 3}))
    code, _, err = call(capsys, "train", "--config", tmp_path / "c.json", "--data", tmp_path / "d",
                        "--out", tmp_path / "r")
    assert code == 2 and json.loads(err)["error"] == "config"
    assert not (tmp_path / "r").exists()


def test_eval_rejects_corrupt_checkpoint(tmp_path, capsys):
    ck = tmp_path / "run/ckpt_3"
    ck.mkdir(parents=True)
    (ck / "meta.json").write_text("{oops")
    call(capsys, "synth", "--per-class", 4, "--out", tmp_path / "d")
    code, _, err = call(capsys, "eval", "--run", tmp_path / "run", "--data", tmp_path / "d")
    assert code == 2 and json.loads(err)["error"] == "input"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "instancegm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "noise", "train", "eval", "report"):
        assert cmd in res.stdout
