"""Environment settings: ``TRACT_STACK_SEED`` and ``TRACT_STACK_THREADS``.

Both may also come from ``.tract-stack/.env`` or ``.env`` under the project
root. The process environment wins over the files, and ``.env`` wins over
``.tract-stack/.env``.
"""

import logging
import os
from pathlib import Path

from dotenv import dotenv_values

log = logging.getLogger(__name__)

SEED_ENV = "TRACT_STACK_SEED"
THREADS_ENV = "TRACT_STACK_THREADS"
DISABLE_ENV = "TRACT_STACK_DISABLE_DOTENV"
SETTINGS = (SEED_ENV, THREADS_ENV)


def _dotenv_disabled() -> bool:
    return os.environ.get(DISABLE_ENV, "").lower() in {"1", "true", "yes", "on"}


def _read_settings(path: Path) -> dict[str, str]:
    settings = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            continue
        if key in SETTINGS:
            settings[key] = value
        elif key.startswith("TRACT_STACK_"):
            log.warning("%s: ignoring unknown setting %s", path, key)
    return settings


def load_project_env(project_root: Path | None = None) -> dict[str, str]:
    """Export seed/threads settings from the project env files; returns what was set."""
    if _dotenv_disabled():
        return {}

    root = project_root if project_root is not None else Path.cwd()
    found: dict[str, str] = {}
    for path in (root / ".tract-stack" / ".env", root / ".env"):
        if path.exists():
            found.update(_read_settings(path))

    applied = {key: value for key, value in found.items() if key not in os.environ}
    os.environ.update(applied)
    if applied:
        log.debug("loaded %s from env files", ", ".join(sorted(applied)))
    return applied


def _env_int(name: str, default: int | None) -> int | None:
    raw = os.environ.get(name, "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        log.warning("%s=%r is not an integer; ignoring it", name, raw)
        return default


def seed_override() -> int | None:
    """Global seed from ``TRACT_STACK_SEED``, or None when unset/invalid."""
    load_project_env()
    return _env_int(SEED_ENV, None)


def default_threads() -> int:
    load_project_env()
    value = _env_int(THREADS_ENV, 1)
    return value if value and value > 0 else 1
