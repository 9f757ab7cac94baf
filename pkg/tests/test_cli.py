import json
import subprocess
import sys


CFG = {
    "n_scenes": 80, "n_refs": 3,
    "heldout_sets": [0], "seeds": [1],
    "approaches": ["interleave"], "tagsets": ["pos"],
    "captioner": {"embed_dim": 16, "hidden_dim": 24, "attn_dim": 12,
                  "feat_proj_dim": 12},
    "lr": 2e-3, "batch_size": 32, "max_epochs": 2, "patience": 1,
    "beam": 4, "top_k": 2,
}


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "captionplan.cli", *args],
                          capture_output=True, text=True)


def test_stage_subcommands_chain(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(CFG))
    corpus = str(tmp_path / "corpus.jsonl")
    split = str(tmp_path / "splits.jsonl")
    ckpt = str(tmp_path / "model.bin")
    dec = str(tmp_path / "dec.jsonl")
    met = str(tmp_path / "metrics.json")

    r = run_cli("gen-data", "--config", str(cfg_path), "--out", corpus)
    assert r.returncode == 0, r.stderr
    r = run_cli("build-splits", "--config", str(cfg_path), "--corpus", corpus,
                "--set-idx", "0", "--out", split)
    assert r.returncode == 0, r.stderr
    cell = ["--approach", "interleave", "--tagset", "pos", "--seed", "1",
            "--set-idx", "0"]
    r = run_cli("train", "--config", str(cfg_path), "--corpus", corpus,
                "--splits", split, *cell, "--out", ckpt)
    assert r.returncode == 0, r.stderr
    r = run_cli("decode", "--config", str(cfg_path), "--corpus", corpus,
                "--splits", split, *cell, "--ckpt", ckpt, "--out", dec)
    assert r.returncode == 0, r.stderr
    r = run_cli("evaluate", "--config", str(cfg_path), "--corpus", corpus,
                "--splits", split, *cell, "--decodes", dec, "--out", met)
    assert r.returncode == 0, r.stderr
    report = json.loads(open(met).read())
    assert report["approach"] == "interleave"
    assert 0 <= report["wellformed"] <= 1


def test_experiment_and_report_commands(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(CFG))
    out = str(tmp_path / "run")
    r = run_cli("experiment", "--config", str(cfg_path), "--out", out,
                "--set", "max_epochs=1")
    assert r.returncode == 0, r.stderr
    r = run_cli("report", "--runs", out, "--out", str(tmp_path / "rep"))
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "rep" / "summary.json").exists()
    assert (tmp_path / "rep" / "report.txt").exists()


def test_failing_stage_sets_exit_code(tmp_path):
    r = run_cli("build-splits", "--corpus", str(tmp_path / "missing.jsonl"),
                "--out", str(tmp_path / "x.jsonl"))
    assert r.returncode == 1
    assert "build-splits failed" in r.stderr
