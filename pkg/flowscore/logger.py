import json
import os
import sys
import time
from typing import Any

_LEVELS = {"debug": 10, "info": 20, "warning": 30, "error": 40}


def _threshold() -> int:
    return _LEVELS.get(os.environ.get("FLOWSCORE_LOG_LEVEL", "info").lower(), 20)


def log(level: str, msg: str, **kv: Any) -> None:
    if _LEVELS.get(level, 20) < _threshold():
        return
    rec = {
        "ts": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "level": level,
        "msg": msg,
    }
    rec.update(kv)
    sys.stdout.write(json.dumps(rec, default=str) + "\n")
    sys.stdout.flush()
