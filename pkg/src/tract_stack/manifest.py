"""JSON manifests and JSON Lines record files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from tract_stack.checkpoint import atomic_write_bytes
from tract_stack.errors import FormatError, IoError

MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


def load_manifest(work_dir: Path, *, required: bool = False) -> dict:
    manifest_path = Path(work_dir) / MANIFEST_NAME
    if not manifest_path.exists():
        if required:
            raise IoError(f"manifest not found: {manifest_path}")
        return {}
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{manifest_path}: manifest must be a JSON object")
    return data


def save_manifest(work_dir: Path, manifest: dict) -> Path:
    manifest_path = Path(work_dir) / MANIFEST_NAME
    atomic_write_bytes(manifest_path, (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    return manifest_path


def write_records(path: Path, rows: Iterable[dict]) -> Path:
    """One JSON object per line, keys in the order each row defines them."""
    path = Path(path)
    lines = [json.dumps(row) for row in rows]
    atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))
    return path


def read_records(path: Path) -> list[dict]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid record: {exc}") from exc
    return rows
