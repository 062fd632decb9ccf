import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from sparsemotion.cli import main
from sparsemotion.config import load_run_config
from sparsemotion.errors import ConfigError

TINY_MODEL = {"window": 60, "d_model": 16, "n_heads": 2, "d_ff": 32, "n_enc_layers": 1,
              "n_dec_layers": 1, "memory_tokens": 2}
TINY = {
    "synth": {"classes": {"walk": 1, "squat": 1, "kick": 1}, "duration_s": 2.5, "test_per_class": 1},
    "prior": {"steps": 3, "batch_size": 2, "lr": 1e-3, "model": TINY_MODEL},
    "sparse": {"steps": 2, "batch_size": 2, "model": TINY_MODEL},
    "sequence": {"steps": 2, "batch_size": 1, "model": {"hidden": 8, "n_layers": 1, "embed_dim": 4, "seq_len": 5}},
    "eval": {"window_stride": 5},
}


def run(*args):
    """The CLI in a child process: (exit code, stdout JSON or None, stderr)."""
    p = subprocess.run([sys.executable, "-m", "sparsemotion", *map(str, args)], capture_output=True, text=True)
    out = json.loads(p.stdout) if p.returncode == 0 and p.stdout.strip() else None
    return p.returncode, out, p.stderr


def tree_hashes(root: Path):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_synth_is_reproducible(tmp_path, cfg_path, capsys):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "7", "--config", str(cfg_path), "--out", str(tmp_path / name)]) == 0
    a, b = tree_hashes(tmp_path / "a"), tree_hashes(tmp_path / "b")
    assert a == b and "train/walk_000.motion" in a and "config.json" in a
    assert main(["synth", "--seed", "8", "--config", str(cfg_path), "--out", str(tmp_path / "c")]) == 0
    assert tree_hashes(tmp_path / "c")["train/walk_000.motion"] != a["train/walk_000.motion"]


def test_stage_order_violations(tmp_path, cfg_path):
    assert main(["synth", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    code, _, err = run("train-sparse", "--data", tmp_path, "--config", cfg_path)
    msg = json.loads(err.strip().splitlines()[-1])
    assert code == 2 and msg["error"] == "MissingCheckpoint" and "prior.ckpt" in msg["message"]
    code, _, err = run("train-seq", "--data", tmp_path, "--prior", tmp_path / "nope.ckpt")
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "MissingCheckpoint"
    code, _, err = run("eval", "--data", tmp_path)
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "MissingCheckpoint"


def test_config_errors_name_the_key(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "prior.stepz=3"]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigError" and "stepz" in err["message"]
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["synth", "--out", str(tmp_path), "--config", str(bad)]) == 2
    assert "bad.json" in json.loads(capsys.readouterr().err.strip())["message"]
    assert main(["train-prior", "--data", str(tmp_path / "empty")]) == 2
    assert json.loads(capsys.readouterr().err.strip())["error"] == "DataError"


def test_run_config_resolution(cfg_path):
    cfg = load_run_config(cfg_path, ["sequence.model.hidden=12", "eval.exact=true", "sparse.lr=0.5"])
    assert cfg["sequence"]["model"]["hidden"] == 12 and cfg["sequence"]["model"]["n_layers"] == 1
    assert cfg["eval"] == {"window_stride": 5, "exact": True}
    assert cfg["sparse"]["lr"] == 0.5 and cfg["prior"]["model"]["d_model"] == 16
    assert cfg["sequence"]["lambda_mo"] == 0.1
    for item in ("nosection=1", "foo.bar=1", "eval.speed=2", "eval.window_stride=0"):
        with pytest.raises(ConfigError):
            load_run_config(None, [item])
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent.json")


def test_end_to_end_smoke(tmp_path, cfg_path):
    d = tmp_path / "data"
    runs = d / "runs"
    steps = [
        ("synth", "--seed", 3),
        ("train-prior", "--seed", 1),
        ("train-prior", "--seed", 2, "--embedding-seed", 5, "--out", runs / "eval-prior"),
        ("train-sparse", "--seed", 1),
        ("train-seq", "--seed", 1),
        ("train-seq", "--seed", 1, "--ablation", "no-motion-prior", "--out", runs / "seq-nmp"),
        ("infer", "--csv"),
        ("eval", "--baseline-seq", runs / "seq-nmp" / "sequence.ckpt"),
    ]
    for cmd in steps:
        code, out, err = run(*cmd, "--data", d, "--config", cfg_path)
        assert code == 0, (cmd, err)
    for sub in ("train-prior", "eval-prior", "train-sparse", "train-seq", "infer", "eval"):
        snap = json.loads((runs / sub / "config.json").read_text())
        assert snap["command"] in sub or sub == "eval-prior"
    log = [json.loads(x) for x in (runs / "train-prior" / "log.jsonl").read_text().splitlines()]
    assert log[0]["step"] == 1 and "wall_s" in log[0]
    assert (runs / "train-seq" / "latent_cache").is_dir()
    assert len(list((runs / "infer").glob("*.motion"))) == 3
    assert len(list((runs / "infer").glob("*_positions.csv"))) == 3
    report = json.loads((runs / "eval" / "eval_report.json").read_text())
    for k in ("mpjpe_cm", "legs_mpjpe_cm", "global_mpjpe_cm", "mpjve_cm_per_s", "motion_distance", "fid"):
        assert isinstance(report[k], float)
    assert report["comparison"]["method"] == "seq-nmp"
    assert set(report["per_action"]) == {"walk", "squat", "kick"}
    assert (runs / "eval" / "eval_report.csv").read_text().startswith("method,MPJPE,")
    # evaluating with the training prior itself is refused
    code, _, err = run("eval", "--data", d, "--eval-prior", runs / "train-prior" / "prior.ckpt")
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "SamePriorError"
