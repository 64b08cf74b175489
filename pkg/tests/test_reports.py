import json
from datetime import datetime

import numpy as np

from flowscore.reports import append_jsonl, read_jsonl, sanitize_row, write_json


def test_sanitize_numpy_and_non_finite():
    row = sanitize_row(
        {
            "mrr": np.float32(0.5),
            "ranks": np.array([1, 2]),
            "loss": float("nan"),
            "nested": {"x": np.inf, "y": [np.int64(3)]},
            "at": datetime(2024, 1, 2, 3, 4, 5),
        }
    )
    assert row == {
        "mrr": 0.5,
        "ranks": [1, 2],
        "loss": None,
        "nested": {"x": None, "y": [3]},
        "at": "2024-01-02T03:04:05",
    }


def test_write_json_is_strict(tmp_path):
    path = tmp_path / "out" / "metrics.json"
    write_json(path, {"mrr": float("nan"), "hits1": np.float64(1.0)})
    assert json.loads(path.read_text()) == {"mrr": None, "hits1": 1.0}


def test_jsonl_appends(tmp_path):
    path = tmp_path / "log.jsonl"
    append_jsonl(path, {"epoch": 0, "loss": 1.5})
    append_jsonl(path, {"epoch": 1, "loss": np.float32(0.25)})
    assert read_jsonl(path) == [{"epoch": 0, "loss": 1.5}, {"epoch": 1, "loss": 0.25}]
