"""Flat-file helpers: fixed-precision CSV, canonical JSON and observation readers."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

SIG_DIGITS = 12


def fmt(value) -> str:
    """Render one CSV cell; floats use 12 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{SIG_DIGITS}g}"
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def dumps(data) -> str:
    """Canonical JSON text (sorted keys, two-space indent, trailing newline)."""
    return json.dumps(data, indent=2, sort_keys=True, default=_default) + "\n"


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path: Path, data) -> Path:
    path = Path(path)
    path.write_text(dumps(data))
    return path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_observations(path: Path) -> np.ndarray:
    """Read ``y`` from a CSV with a ``y`` column or from one number per line."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path} contains no observations")
    first = next(csv.reader([lines[0]]))
    if any(cell.strip().lower() == "y" for cell in first):
        col = [c.strip().lower() for c in first].index("y")
        body = [next(csv.reader([ln])) for ln in lines[1:]]
        raw = [row[col] if col < len(row) else "" for row in body]
        start = 2
    else:
        raw = lines
        start = 1
    values = np.empty(len(raw))
    for i, cell in enumerate(raw):
        try:
            values[i] = float(cell)
        except ValueError:
            raise DataError(f"{path}, line {i + start}: {cell!r} is not a number") from None
    if values.size == 0:
        raise DataError(f"{path} contains no observations")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path} contains NaN or infinite values")
    return values
