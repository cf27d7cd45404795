import json

import pytest

from espa.cli import blob_hash, run

SMALL = {
    "synth": {"n_students": 60, "n_courses": 12, "n_terms": 4, "courses_per_term": 2},
    "model": {"D_e": 8, "D_h": 6},
    "train": {"batch_size": 64},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", str(cfg)]
    assert run(["synth", *c, "--seed", "7", "--out", str(root / "synth")]) == 0
    assert run(["sample", *c, "--data", str(root / "synth" / "graph.tsv"), "--out", str(root / "data")]) == 0
    assert run(["train", *c, "--data", str(root / "data"), "--epochs", "2", "--out", str(root / "run")]) == 0
    return root, c


def test_blob_hash_matches_git(tmp_path):
    f = tmp_path / "x"
    f.write_bytes(b"hello\n")
    assert blob_hash(f) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_synth_is_reproducible(pipeline, tmp_path):
    root, c = pipeline
    assert run(["synth", *c, "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("graph.tsv", "ground_truth.json"):
        assert blob_hash(tmp_path / name) == blob_hash(root / "synth" / name)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 7 and manifest["config"]["n_students"] == 60


def test_sample_outputs(pipeline):
    root, _ = pipeline
    names = {p.name for p in (root / "data").iterdir()}
    assert {"train.jsonl", "test.jsonl", "vocab.json", "stats.json", "manifest.json"} <= names
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    graph = str(root / "synth" / "graph.tsv")
    assert manifest["inputs"] == {graph: blob_hash(graph)} and manifest["config"]["split_term"] == 4


def test_train_outputs(pipeline):
    root, _ = pipeline
    log = (root / "run" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,dev_auc" and len(log) == 3
    assert (root / "run" / "checkpoint.espt").is_file()


def test_eval_table(pipeline, capsys):
    root, c = pipeline
    capsys.readouterr()
    args = ["eval", *c, "--data", str(root / "data"), "--checkpoint", str(root / "run" / "checkpoint.espt")]
    assert run(args) == 0
    out = capsys.readouterr().out
    assert "ESPA" in out and "Majority" in out and "1 (fail)" in out
    assert run([*args, "--format", "json", "--out", str(root / "eval")]) == 0
    rep = json.loads((root / "eval" / "report.json").read_text())
    assert rep["Majority"]["auc"] == 0.5


def test_explain_formats(pipeline):
    root, c = pipeline
    base = ["explain", *c, "--data", str(root / "data"), "--checkpoint", str(root / "run" / "checkpoint.espt")]
    for fmt, ext in (("json", "json"), ("dot", "dot"), ("text", "txt")):
        out = root / f"explain_{fmt}"
        assert run([*base, "--format", fmt, "--count", "2", "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob(f"report_*.{ext}")) == [f"report_000.{ext}", f"report_001.{ext}"]
    rep = json.loads((root / "explain_json" / "report_000.json").read_text())
    assert abs(sum(g["weight"] for g in rep["groups"]) - 1.0) < 1e-9
    assert run([*base, "--index", "100000"]) == 3
    assert run([*base, "--student", "nobody", "--course", "none"]) == 3


def test_ablate_rows(pipeline):
    root, c = pipeline
    out = root / "ablate"
    assert run(["ablate", *c, "--data", str(root / "data"), "--epochs", "1", "--out", str(out)]) == 0
    result = json.loads((out / "ablation.json").read_text())
    assert set(result["mean_auc"]) == {
        "ESPA", "w/o biases", "w/o subtask", "w/o local-attn", "w/o global-attn", "w/o both-attn",
    }
    assert "mean AUC" in (out / "ablation.txt").read_text()


def test_gridsearch(pipeline):
    root, c = pipeline
    out = root / "grid"
    assert run(["gridsearch", *c, "--data", str(root / "data"), "--epochs", "1", "--out", str(out)]) == 0
    rows = (out / "grid.csv").read_text().splitlines()
    assert len(rows) == 17
    best = json.loads((out / "best_config.json").read_text())["train"]
    top = max(float(r.split(",")[2]) for r in rows[1:])
    assert any(float(r.split(",")[2]) == top and float(r.split(",")[0]) == best["learning_rate"] for r in rows[1:])


def test_usage_errors(pipeline, capsys):
    root, _ = pipeline
    assert run(["synth", "--bogus"]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["synth"]) == 2  # --out missing
    assert run(["eval", "--data", "x", "--checkpoint", "y", "--format", "dot"]) == 2


def test_data_errors(pipeline, tmp_path):
    root, _ = pipeline
    bad = tmp_path / "bad.tsv"
    bad.write_text("Bob\tStudent\tlikes\tOS\tCourse\n")
    assert run(["ingest", "--data", str(bad)]) == 3
    assert run(["ingest", "--data", str(tmp_path / "missing.tsv")]) == 3
    assert run(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "cfg.json").write_text("[1, 2]")
    assert run(["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path)]) == 3
    (tmp_path / "cfg2.json").write_text(json.dumps({"model": {"D_e": 0}}))
    args = ["train", "--config", str(tmp_path / "cfg2.json"), "--data", str(root / "data"), "--out", str(tmp_path)]
    assert run(args) == 3
    assert run(["eval", "--data", str(root / "data"), "--checkpoint", str(bad)]) == 3


def test_ingest_summary(pipeline, capsys):
    root, _ = pipeline
    capsys.readouterr()
    assert run(["ingest", "--data", str(root / "synth" / "graph.tsv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["entities_per_kind"]["Student"] == 60
