"""Line-delimited JSON files with a header record, written atomically."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

from .errors import FormatError


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_records(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def write_jsonl(path: str | Path, header: dict | None, records: Iterable[dict]) -> None:
    lines = ([header] if header is not None else []) + list(records)
    atomic_write_text(path, dumps_records(lines))


def read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    """Return ``(line_number, record)`` pairs; blank lines are skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(rec, dict):
                raise FormatError("record is not an object", lineno)
            out.append((lineno, rec))
    return out


def read_with_header(path: str | Path, kind: str) -> tuple[dict, list[tuple[int, dict]]]:
    rows = read_jsonl(path)
    if not rows:
        raise FormatError(f"empty {kind} file", 1)
    lineno, header = rows[0]
    if header.get("format") != kind:
        raise FormatError(f"expected a {kind} header, found format={header.get('format')!r}", lineno)
    n = header.get("steps")
    body = rows[1:]
    if not isinstance(n, int) or n != len(body):
        last = body[-1][0] if body else lineno
        raise FormatError(f"header announces {n} records but file holds {len(body)} (truncated?)", last)
    return header, body
