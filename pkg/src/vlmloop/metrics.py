"""Line-delimited metric and trace records.

One JSON object per line, keys in a fixed order, no timestamps: files from
two runs of the same config+seed must be byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path


def format_record(record: dict) -> str:
    return json.dumps(record, allow_nan=False, separators=(", ", ": "))


def write_records(path: str | Path, records: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(format_record(rec) + "\n")


def append_record(path: str | Path, record: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(format_record(record) + "\n")


def read_records(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]
