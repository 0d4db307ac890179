"""Versioned, append-only campaign history files.

Line 1 is a magic+version header; each following line is one JSON record per
iteration.  Identical seeds and scripted backends produce byte-identical
files (nothing wall-clock-dependent is written).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .errors import ParseError
from .optimizer import IterationRecord

MAGIC = "aflow-history"
VERSION = 1


def write_history(path: str | Path, records: Iterable[IterationRecord]) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    lines += [json.dumps(r.to_dict(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_history(path: str | Path) -> list[dict]:
    """Load history records; raises ParseError on a version mismatch or a
    corrupted record (naming its index)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty history file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MAGIC:
        raise ParseError(f"not a history file: {lines[0]!r}")
    if head[1] != str(VERSION):
        raise ParseError(f"history version mismatch: file has {head[1]}, expected {VERSION}")
    records = []
    for index, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"corrupted history record {index}: {exc}") from None
        if not isinstance(record, dict) or "iteration" not in record:
            raise ParseError(f"corrupted history record {index}: not an iteration record")
        records.append(record)
    return records


def running_max(records: list[dict]) -> list[float]:
    best = 0.0
    out = []
    for r in records:
        best = max(best, float(r["score"]))
        out.append(best)
    return out
