"""
I/O helpers: CSV and JSON artifacts, line-delimited traces, digests, atomic writes.
"""

import hashlib
import json
import logging
import os
import subprocess
import tempfile
from pathlib import Path
from typing import Any

import pandas as pd

from .errors import ParseError

logger = logging.getLogger(__name__)

ROOT_DIR = Path(__file__).resolve().parent.parent.parent


def load_csv(path: Path, **kwargs) -> pd.DataFrame:
    """Load a CSV into a DataFrame with logging."""
    logger.info("Loading %s", path)
    df = pd.read_csv(path, low_memory=False, **kwargs)
    logger.info("Loaded %d rows × %d cols from %s", len(df), len(df.columns), Path(path).name)
    return df


def save_csv(df: pd.DataFrame, path: Path, float_format: str | None = "%.10g") -> Path:
    """Save a DataFrame to CSV with a fixed float format so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
    logger.info("Saved %d rows to %s", len(df), path)
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_json(payload: Any, path: Path) -> Path:
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
    atomic_write_text(path, text)
    logger.info("Wrote %s", path)
    return path


def read_json(path: Path) -> Any:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise ParseError(f"{path} is empty", line=1)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc


def append_jsonl(record: dict, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    """Parse a line-delimited JSON file; malformed or empty input raises ParseError with a line number."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: {exc.msg}", line=lineno) from exc
            if not isinstance(record, dict):
                raise ParseError(f"{path}: expected an object per line", line=lineno)
            records.append(record)
    if not records:
        raise ParseError(f"{path} holds no records", line=1)
    return records


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    """``git describe`` of the source tree, or 'unknown'."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            cwd=ROOT_DIR,
        )
        return result.stdout.strip() if result.returncode == 0 else "unknown"
    except FileNotFoundError:
        return "unknown"


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
