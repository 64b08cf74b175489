import csv
import json
import os

import pytest

from flowscore.main import main

SMALL = ["--dim", "16", "--heads", "2", "--hops", "1", "--epochs", "2", "--batch-size", "4", "--negatives", "5"]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("FLOWSCORE_") and key != "FLOWSCORE_DATA":
            monkeypatch.delenv(key)


@pytest.fixture
def trained(toy_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(toy_dir), "--out", str(out)] + SMALL) == 0
    return out


def test_train_writes_outputs(trained):
    assert (trained / "model.fms").is_file()
    assert (trained / "resolved_config").is_file()
    assert len((trained / "epoch_log.jsonl").read_text().splitlines()) == 2
    metrics = json.loads((trained / "metrics.json").read_text())
    assert metrics["task"] == "relation"
    assert metrics["split"] == "test"
    assert metrics["filtered"] is True
    assert metrics["num_queries"] == 4
    for key in ("mrr", "hits1", "hits3", "hits10"):
        assert 0 <= metrics[key] <= 1
    assert set(metrics["per_category"]) <= {"1-1", "1-N", "N-1", "N-N", "multi_relation"}


def test_eval_reproduces_train_metrics(trained, toy_dir):
    argv = ["eval", "--dataset", str(toy_dir), "--out", str(trained), "--split", "test"] + SMALL
    assert main(argv) == 0
    before = json.loads((trained / "metrics.json").read_text())
    after = json.loads((trained / "metrics_test.json").read_text())
    assert after == before


def test_eval_and_export_echo_their_config(trained, toy_dir):
    train_config = (trained / "resolved_config").read_text()
    assert main(["eval", "--dataset", str(toy_dir), "--out", str(trained), "--split", "valid"] + SMALL) == 0
    assert main(["export", "correlation", "--dataset", str(toy_dir), "--out", str(trained)] + SMALL) == 0
    assert "split = valid" in (trained / "resolved_config_eval").read_text().splitlines()
    assert "split = test" in (trained / "resolved_config_export").read_text().splitlines()
    assert (trained / "resolved_config").read_text() == train_config


def test_ablation_is_recorded(toy_dir, tmp_path):
    out = tmp_path / "ablate"
    argv = ["train", "--dataset", str(toy_dir), "--out", str(out), "--ablation", "no-topk"] + SMALL
    assert main(argv) == 0
    assert "selection_mode = random_k" in (out / "resolved_config").read_text().splitlines()
    assert json.loads((out / "metrics.json").read_text())["ablation"] == "no-topk"


def test_corrupt_checkpoint_is_data_error(trained, toy_dir):
    ckpt = trained / "model.fms"
    blob = bytearray(ckpt.read_bytes())
    blob[:4] = b"NOPE"
    ckpt.write_bytes(bytes(blob))
    assert main(["eval", "--dataset", str(toy_dir), "--out", str(trained)] + SMALL) == 2


def test_mismatched_checkpoint_names_tensor(trained, toy_dir, capsys):
    argv = ["eval", "--dataset", str(toy_dir), "--out", str(trained), "--dim", "8"] + SMALL[2:]
    capsys.readouterr()
    assert main(argv) == 2
    failures = [json.loads(line) for line in capsys.readouterr().out.splitlines() if "command_failed" in line]
    assert "rel_emb" in failures[-1]["error"]


def test_unknown_flag(toy_dir):
    assert main(["train", "--dataset", str(toy_dir), "--bogus", "1"]) == 1


def test_bad_choice():
    assert main(["train", "--dataset", "x", "--task", "triples"]) == 1


def test_missing_dataset_flag():
    assert main(["train"]) == 1


def test_missing_dataset_directory(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path / "run")] + SMALL) == 2


def test_undecodable_split_is_data_error(toy_dir, tmp_path, capsys):
    (toy_dir / "test.txt").write_bytes(b"a0\tr0\tb0\n\xff\xfe\tr1\tc\n")
    capsys.readouterr()
    assert main(["train", "--dataset", str(toy_dir), "--out", str(tmp_path / "run")] + SMALL) == 2
    failures = [json.loads(line) for line in capsys.readouterr().out.splitlines() if "command_failed" in line]
    assert "line 2: invalid UTF-8" in failures[-1]["error"]


def test_correlation_export(trained, toy_dir):
    argv = ["export", "correlation", "--dataset", str(toy_dir), "--out", str(trained)] + SMALL
    assert main(argv) == 0
    with (trained / "correlation.csv").open(newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0][0] == "context_relation"
    assert sorted(rows[0][1:]) == ["r0", "r1", "r2"]
    assert [r[0] for r in rows[1:]] == rows[0][1:]
    values = [float(x) for r in rows[1:] for x in r[1:]]
    assert all(0 <= v <= 1 for v in values)


def test_flowvis_export(trained, toy_dir):
    argv = ["export", "flowvis", "--dataset", str(toy_dir), "--out", str(trained), "--split", "valid"] + SMALL
    assert main(argv) == 0
    with (trained / "flowvis.csv").open(newline="") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 + 4
    assert all(len(r) == 4 + 4 * 16 for r in rows)
    assert rows[0][:5] == ["query", "head", "relation", "tail", "static_0"]
