"""Small JSON file helpers with structured errors and atomic writes."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .errors import DataError


def load_json(path: str | Path, what: str = "file") -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what}: no such file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{what}: invalid JSON in {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{what}: expected a JSON object at top level in {path}")
    return obj


def atomic_write_json(obj: dict, path: str | Path) -> None:
    """Write-then-rename so a failed run never leaves a partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def require_field(obj: dict, key: str, what: str):
    if key not in obj:
        raise DataError(f"{what}: missing required field '{key}'")
    return obj[key]
