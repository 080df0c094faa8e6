import csv
import json

import numpy as np
import pytest

from medstat.cli import main

TINY = """\
# small enough for unit tests
tokenizer.d = 8
tokenizer.segment.tapping = 256
tokenizer.segment.walking = 256
tokenizer.segment.memory = 8
encoder.layers = 1
encoder.heads = 2
train.epochs = 1
train.batch_size = 4
train.learning_rate = 1e-3
synth.patients = 8
synth.min_records = 8
synth.max_records = 10
folds = 2
"""


def run(*argv):
    return main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run("synth", "--config", cfg, "--seed", 3, "--out", root / "synth") == 0
    assert run("ingest", "--config", cfg, "--in", root / "synth" / "corpus.jsonl",
               "--out", root / "store") == 0
    assert run("split", "--config", cfg, "--store", root / "store", "--out", root / "split") == 0
    return root, cfg


def test_synth_and_ingest_outputs(workspace):
    root, _ = workspace
    summary = json.loads((root / "store" / "summary.json").read_text())
    manifest = json.loads((root / "synth" / "manifest.json").read_text())
    assert summary["patients"] == 8 == len(manifest["patients"])
    assert summary["records"] == sum(len(p["records"]) for p in manifest["patients"])
    assert set(summary["records_per_class"]) == {"another_time", "before_med", "after_med"}
    assert summary["records_per_patient"]["all"]["mean"] > 0
    resolved = (root / "synth" / "config.resolved").read_text()
    assert "tokenizer.d = 8" in resolved and "synth.seed = 3" in resolved and "train.seed = 3" in resolved


def test_ingest_class_proportions_match_generator(tmp_path):
    assert run("synth", "--out", tmp_path / "s") == 0
    assert run("ingest", "--in", tmp_path / "s" / "corpus.jsonl", "--out", tmp_path / "i") == 0
    summary = json.loads((tmp_path / "i" / "summary.json").read_text())
    mix = dict(zip(["another_time", "before_med", "after_med"], (0.5, 0.25, 0.25)))
    for name, frac in summary["class_fraction"].items():
        assert frac == pytest.approx(mix[name], abs=0.02)


def test_ingest_empty_file(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run("ingest", "--in", empty, "--out", tmp_path / "o") == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["records"] == 0 and summary["patients"] == 0
    assert (tmp_path / "o" / "records.jsonl").read_text() == ""


def test_corrupt_line_reports_line_number(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"patient_id": "a", "modality": "tapping", "timestamp": 1, "status": '
                   '"before_med", "samples": [[0, 1, 2, 3]]}\n{oops\n')
    assert run("ingest", "--in", bad, "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("error: ingest: ") and "line 2" in err[0]


def test_invalid_config_fails_before_work(tmp_path, capsys):
    assert run("synth", "--set", "encoder.heads=3", "--set", "tokenizer.d=8",
               "--out", tmp_path / "o") == 1
    assert "not divisible" in capsys.readouterr().err
    assert run("synth", "--set", "train.nope=1", "--out", tmp_path / "o2") == 1
    assert not (tmp_path / "o2" / "corpus.jsonl").exists()


def test_split_covers_all_patients(workspace):
    root, _ = workspace
    folds = json.loads((root / "split" / "folds.json").read_text())
    assert folds["folds"] == 2 and len(folds["assignment"]) == 8


def test_train_is_byte_reproducible(workspace):
    root, cfg = workspace
    outs = []
    for name in ("t1", "t2"):
        assert run("train", "--config", cfg, "--store", root / "store", "--folds",
                   root / "split" / "folds.json", "--fold", 0, "--out", root / name) == 0
        outs.append((root / name / "history.jsonl").read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0].splitlines()) == 1


def test_eval_explain_and_report(workspace):
    root, cfg = workspace
    train_dir = root / "t1"
    if not (train_dir / "params.npz").exists():
        assert run("train", "--config", cfg, "--store", root / "store", "--out", train_dir) == 0
    assert run("eval", "--config", cfg, "--store", root / "store", "--params",
               train_dir / "params.npz", "--folds", root / "split" / "folds.json", "--fold", 0,
               "--group-by", "age_bucket", "--out", root / "eval") == 0
    preds = read_rows(root / "eval" / "predictions.csv")
    assert preds and all(abs(float(r["p0"]) + float(r["p1"]) + float(r["p2"]) - 1) < 1e-9 for r in preds)
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0

    patient = preds[0]["patient_id"]
    assert run("explain", "--config", cfg, "--store", root / "store", "--params",
               train_dir / "params.npz", "--patient", patient, "--out", root / "explain") == 0
    trace = json.loads((root / "explain" / "trace.json").read_text())
    for layer in trace["layers"]:
        for head in layer["heads"]:
            for row in head["rows"]:
                assert sum(row["probs"]) == pytest.approx(1.0, abs=1e-6)
    shares = [float(r["share"]) for r in read_rows(root / "explain" / "history_attention.csv")]
    assert len(shares) == 4 and sum(shares) == pytest.approx(1.0)

    assert run("report", "--predictions", root / "eval" / "predictions.csv",
               "--out", root / "report") == 0
    hourly = read_rows(root / "report" / "hourly_status.csv")
    assert len(hourly) == 24
    for name in ("group_auc_age.csv", "group_auc_same_label.csv", "patient_timeline.csv"):
        assert (root / "report" / name).exists()


def test_kfold_eval_and_ablate(workspace):
    root, cfg = workspace
    assert run("eval", "--config", cfg, "--store", root / "store", "--out", root / "kfold") == 0
    rows = read_rows(root / "kfold" / "metrics.csv")
    assert [r["split"] for r in rows] == ["fold0", "fold1"]
    assert run("ablate", "--config", cfg, "--store", root / "store", "--out", root / "ablate") == 0
    rows = read_rows(root / "ablate" / "ablations.csv")
    assert len(rows) == 12
    by = {(r["axis"], r["setting"]): r for r in rows}
    assert by[("merge_length", "G=1")]["auc_mean"] == by[("shuffle_merge", "off")]["auc_mean"]


def test_explain_unknown_patient(workspace, capsys):
    root, cfg = workspace
    assert run("explain", "--config", cfg, "--store", root / "store", "--params",
               root / "missing.npz", "--patient", "nobody", "--out", root / "x") == 1
    assert "unknown patient" in capsys.readouterr().err


def test_report_missing_predictions(tmp_path, capsys):
    assert run("report", "--predictions", tmp_path / "none.csv", "--out", tmp_path / "r") == 1
    assert capsys.readouterr().err.startswith("error: report:")
