# flowscore/reports.py

import json
import math
from datetime import date, datetime
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np


# ---------- JSON sanitization helpers ----------

def _sanitize_value(v: Any) -> Any:
    """
    Make a value safe for strict JSON:
    - numpy scalars/arrays -> python numbers/lists
    - NaN / +/-inf -> None
    - datetimes -> ISO strings
    - dicts/lists/tuples -> sanitized recursively
    """
    if isinstance(v, (datetime, date)):
        return v.isoformat()

    if isinstance(v, np.ndarray):
        return [_sanitize_value(x) for x in v.tolist()]

    if isinstance(v, np.generic):
        v = v.item()

    if isinstance(v, float):
        if not math.isfinite(v):
            return None
        return v

    if isinstance(v, dict):
        return {str(k): _sanitize_value(x) for k, x in v.items()}

    if isinstance(v, (list, tuple)):
        return [_sanitize_value(x) for x in v]

    return v


def sanitize_row(row: Mapping[str, Any]) -> Dict[str, Any]:
    return {k: _sanitize_value(v) for k, v in row.items()}


def write_json(path: Path, payload: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sanitize_row(payload), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def append_jsonl(path: Path, record: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(sanitize_row(record), allow_nan=False) + "\n")


def read_jsonl(path: Path) -> list:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
