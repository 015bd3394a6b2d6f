"""CSV persistence: header row, full-precision values, and a trailing
metadata comment carrying the config hash and seed. Writes are atomic
(temp file + rename)."""

from __future__ import annotations

import csv
import os
import tempfile
from typing import Iterable, Sequence


def _format(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(
    path: str,
    header: Sequence[str],
    rows: Iterable[Sequence],
    metadata: dict | None = None,
) -> str:
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format(v) for v in row])
            if metadata:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in metadata.items()) + "\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def read_csv(path: str) -> tuple[list[str], list[list[str]], dict]:
    """(header, data rows, metadata) with comment lines parsed out."""
    metadata: dict = {}
    rows: list[list[str]] = []
    header: list[str] = []
    with open(path, newline="") as fh:
        for i, line in enumerate(fh):
            if line.startswith("#"):
                for part in line[1:].split():
                    if "=" in part:
                        k, v = part.split("=", 1)
                        metadata[k] = v
                continue
            parsed = next(csv.reader([line]))
            if not header:
                header = parsed
            elif parsed:
                rows.append(parsed)
    return header, rows, metadata
