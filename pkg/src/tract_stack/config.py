"""Run configuration: training hyperparameters, phantom spec and paths.

A run config file is a JSON object with the sections ``train``, ``phantom``
and ``paths`` plus the scalars ``bundle`` and ``split``. Every key is
optional; unknown keys are rejected. Resolution order is defaults, then the
file, then ``TRACT_STACK_SEED``, then explicit overrides.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from tract_stack.checkpoint import atomic_write_bytes
from tract_stack.env import seed_override
from tract_stack.errors import ConfigError
from tract_stack.phantom import PhantomSpec
from tract_stack.unet import PRESETS

VALID_OPTIMIZERS = {"adam", "sgd"}
VALID_NORMALIZATIONS = {"joint", "channel"}
EFFECTIVE_CONFIG_NAME = "effective_config.json"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    batch_size: int = 8
    epochs: int = 70
    dropout_p: float = 0.4
    lr_decay_per_epoch: float = 0.03
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    preset: str = "phantom"
    threshold: float = 0.5
    normalization: str = "joint"
    batch_size_eval: int = 8

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.learning_rate < 1.0:
            raise ConfigError(f"learning_rate must be in (0, 1), got {self.learning_rate}")
        if not 0.0 <= self.lr_decay_per_epoch < 1.0:
            raise ConfigError(
                f"lr_decay_per_epoch must be in [0, 1), got {self.lr_decay_per_epoch}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1 or self.batch_size_eval < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in VALID_OPTIMIZERS:
            raise ConfigError(
                f"optimizer must be one of: {', '.join(sorted(VALID_OPTIMIZERS))}"
            )
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of: {', '.join(sorted(PRESETS))}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.normalization not in VALID_NORMALIZATIONS:
            raise ConfigError(
                f"normalization must be one of: {', '.join(sorted(VALID_NORMALIZATIONS))}"
            )
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("adam betas must be in [0, 1)")
        return self


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    model_dir: str = "models"
    report_dir: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    paths: Paths = field(default_factory=Paths)
    bundle: str = "bundle"
    split: tuple[int, int, int] = (20, 5, 5)


def _tupled(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


def _section(cls, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{section}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**{k: _tupled(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def run_config_from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    split = tuple(data.get("split", (20, 5, 5)))
    if len(split) != 3 or any(not isinstance(n, int) or n < 0 for n in split):
        raise ConfigError(f"split must be three non-negative integers, got {split}")
    config = RunConfig(
        train=_section(TrainConfig, data.get("train", {}), "train"),
        phantom=_section(PhantomSpec, data.get("phantom", {}), "phantom"),
        paths=_section(Paths, data.get("paths", {}), "paths"),
        bundle=str(data.get("bundle", "bundle")),
        split=split,  # type: ignore[arg-type]
    )
    config.train.validate()
    return config


def load_run_config(path: Path | str | None = None, **overrides) -> RunConfig:
    """Resolve a RunConfig. ``overrides`` name TrainConfig fields; None is ignored."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    config = run_config_from_dict(data)

    env_seed = seed_override()
    if env_seed is not None:
        config = replace(config, train=replace(config.train, seed=env_seed))

    train_fields = {f.name for f in fields(TrainConfig)}
    updates = {k: v for k, v in overrides.items() if v is not None}
    unknown = sorted(set(updates) - train_fields)
    if unknown:
        raise ConfigError(f"unknown override(s): {', '.join(unknown)}")
    if updates:
        config = replace(config, train=replace(config.train, **updates))
    config.train.validate()
    return config


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    return json.loads(json.dumps(asdict(config)))


def write_effective_config(config: RunConfig, out_dir: Path | str) -> Path:
    """Echo the effective config into ``out_dir``; reloadable with load_run_config."""
    path = Path(out_dir) / EFFECTIVE_CONFIG_NAME
    payload = json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, payload.encode("utf-8"))
    return path


def config_hash(train: TrainConfig) -> str:
    canonical = json.dumps(asdict(train), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
