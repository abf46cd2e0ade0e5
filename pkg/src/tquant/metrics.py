"""Line-delimited JSON metrics files.

Every record is one JSON object per line.  ``TQ_METRICS_DIR`` overrides
the directory that relative metrics paths resolve against.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

ENV_DIR = "TQ_METRICS_DIR"


def metrics_path(name: str, out_dir: str | None = None) -> Path:
    base = os.environ.get(ENV_DIR) or out_dir or "."
    p = Path(base)
    p.mkdir(parents=True, exist_ok=True)
    return p / name


def append_records(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def read_records(path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
