import json
import subprocess
import sys

import numpy as np
import pytest

from capsed import training
from capsed.checkpoint import read_header
from capsed.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from capsed.errors import NumericError
from capsed.features import write_wav

MODEL = {
    "blocks": [{"n_kernels": 4, "kernel": [3, 3], "pool": 4, "batchnorm": True}],
    "primary": {"n_caps": 3, "n_kernels": 2, "kernel": [3, 3]},
    "detection": {"dim": 4},
    "routing": {"iterations": 2},
}
CONFIG = {
    "features": {"feature_kind": "logmel", "context_T": 16},
    "model": MODEL,
    "optimizer": {"max_epochs": 2, "patience": 2, "batch_size": 8},
    "search": {"n_layers": [1, 1], "n_kernels": [2, 4], "kernel_dim": [3, 3], "pool": [2, 4], "n_caps": [2, 3],
               "caps_kernels": [2, 3], "detection_dim": [2, 4], "routing": [1, 2], "caps_kernel_dim": [3, 3]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "config.json").write_text(json.dumps(CONFIG))
    assert main(["synth", "--out", str(root / "data"), "--files", "4", "--length", "12", "--folds", "2",
                 "--seed", "3"]) == EXIT_OK
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_is_reproducible(workspace, tmp_path):
    assert run("synth", "--out", tmp_path / "again", "--files", 4, "--length", 12, "--folds", 2, "--seed", 3) == 0
    for name in ("synth_000.wav", "synth_003.tsv", "manifest.json", "synth_spec.json"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_features_writes_normalized_arrays(workspace, tmp_path):
    assert run("features", workspace / "data", "--out", tmp_path, "--config", workspace / "config.json") == 0
    feats = np.load(tmp_path / "synth_000.features.npy")
    roll = np.load(tmp_path / "synth_000.roll.npy")
    assert feats.shape == (599, 40, 1) and roll.shape == (599, 3)
    assert (tmp_path / "norm.json").exists()


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "model" / "m.ckpt"
    assert run("train", workspace / "data", "--out", out, "--config", workspace / "config.json", "--seed", 5) == 0
    return out


def test_train_reruns_are_byte_identical(workspace, trained, tmp_path):
    again = tmp_path / "m.ckpt"
    assert run("train", workspace / "data", "--out", again, "--config", workspace / "config.json", "--seed", 5) == 0
    assert again.read_bytes() == trained.read_bytes()
    assert again.with_suffix(".report.jsonl").read_bytes() == trained.with_suffix(".report.jsonl").read_bytes()
    rows = [json.loads(x) for x in trained.with_suffix(".report.jsonl").read_text().splitlines()]
    assert [r["type"] for r in rows] == ["epoch", "epoch", "summary"]
    assert "wall_time" not in rows[-1]


def test_predict_then_evaluate_reproduces_report(workspace, trained, tmp_path):
    data = workspace / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    val = [data / e["audio"] for e in manifest["entries"] if e["fold"] == 0]
    assert run("predict", trained, *val, "--out", tmp_path / "hyp") == 0
    assert run("evaluate", data, tmp_path / "hyp", "--folds", 0, "--out", tmp_path / "score.json") == 0
    score = json.loads((tmp_path / "score.json").read_text())
    summary = json.loads(trained.with_suffix(".report.jsonl").read_text().splitlines()[-1])
    assert score["error_rate"] == pytest.approx(summary["best_val_er"], abs=1e-9)
    assert score["files"] == len(val)


def test_probability_dump(workspace, trained, tmp_path):
    wav = workspace / "data" / "synth_001.wav"
    assert run("predict", trained, wav, "--out", tmp_path, "--probs") == 0
    lines = (tmp_path / "synth_001.probs.tsv").read_text().splitlines()
    assert lines[0] == "frame\ttime\tharmonic\tnoise\tchirp"
    assert len(lines) == 1 + 599
    row = lines[10].split("\t")
    assert row[:2] == ["9", "0.180"] and all(0 <= float(p) <= 1 for p in row[2:])


def test_monophonic_output_has_one_event_per_class(workspace, trained, tmp_path):
    wav = workspace / "data" / "synth_002.wav"
    assert run("predict", trained, wav, "--out", tmp_path, "--monophonic", "--decay-len", 5, "--median-win", 3) == 0
    labels = [line.split("\t")[2] for line in (tmp_path / "synth_002.tsv").read_text().splitlines()]
    assert len(labels) == len(set(labels)) <= 3
    assert run("predict", trained, wav, "--out", tmp_path, "--monophonic", "--median-win", 4) == EXIT_USAGE


def test_silence_gives_near_empty_output(workspace, trained, tmp_path):
    write_wav(tmp_path / "quiet.wav", np.zeros(16000 * 3))
    assert run("predict", trained, tmp_path / "quiet.wav", "--out", tmp_path / "hyp", "--probs") == 0
    probs = np.loadtxt(tmp_path / "hyp" / "quiet.probs.tsv", skiprows=1)[:, 2:]
    assert np.all(np.isfinite(probs))
    assert np.mean(probs >= 0.5) < 0.05
    events = (tmp_path / "hyp" / "quiet.tsv").read_text().splitlines()
    assert len(events) <= 3


def test_cnn_head_and_persistent_routing_in_header(workspace, tmp_path, capsys):
    cfg = workspace / "config.json"
    assert run("train", workspace / "data", "--out", tmp_path / "c.ckpt", "--config", cfg, "--head", "cnn",
               "--max-epochs", 1, "--patience", 1) == 0
    assert run("train", workspace / "data", "--out", tmp_path / "p.ckpt", "--config", cfg, "--routing",
               "persistent", "--max-epochs", 1, "--patience", 1) == 0
    assert read_header(tmp_path / "c.ckpt")["head"] == "cnn"
    assert read_header(tmp_path / "p.ckpt")["routing_mode"] == "persistent"
    capsys.readouterr()
    assert run("inspect", tmp_path / "c.ckpt") == 0
    census = json.loads(capsys.readouterr().out)["census"]
    assert not any(k.startswith(("primary", "detection")) for k in census)


def test_inspect_preset(capsys):
    assert run("inspect", "--preset", "home") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["census"]["total"] == 256_320


def test_event_mode_and_missing_hypotheses(workspace, tmp_path, capsys):
    data = workspace / "data"
    assert run("evaluate", data, tmp_path, "--mode", "event") == 0
    report = json.loads(capsys.readouterr().out)
    scene = report["scenes"]["synthetic"]
    assert report["error_rate"] == 1.0 and scene["D"] == scene["N"] and scene["I"] == 0
    assert run("evaluate", data, data) == 0
    assert json.loads(capsys.readouterr().out)["error_rate"] == 0.0


def test_search_is_reproducible(workspace, tmp_path):
    cfg = workspace / "config.json"
    for name in ("a", "b"):
        assert run("search", workspace / "data", "--out", tmp_path / name, "--config", cfg, "--trials", 2,
                   "--max-epochs", 1, "--patience", 1, "--seed", 9) == 0
    for f in ("trials.jsonl", "best.ckpt", "best.report.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = [json.loads(x) for x in (tmp_path / "a" / "trials.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and rows[0]["rank_key"] <= rows[1]["rank_key"]


def test_exit_codes(workspace, tmp_path, monkeypatch):
    assert run("inspect") == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert run("inspect", "--preset", "home", "--config", bad) == EXIT_USAGE
    assert run("train", tmp_path / "nowhere", "--out", tmp_path / "x.ckpt") == EXIT_DATA
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert run("inspect", tmp_path / "junk.ckpt") == EXIT_DATA
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE

    def diverge(*a, **k):
        raise NumericError("loss diverged")

    monkeypatch.setattr(training, "train", diverge)
    assert run("search", workspace / "data", "--out", tmp_path / "s", "--config", workspace / "config.json",
               "--trials", 1) == EXIT_NUMERIC
    assert (tmp_path / "s" / "trials.jsonl").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "capsed", "inspect", "--preset", "street"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["census"]["total"] == 216_344
