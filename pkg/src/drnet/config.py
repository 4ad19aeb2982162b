"""Run configuration: flat ``key = value`` text files plus command-line overrides.

Keys are dotted paths (``model.initial_channels = 16``); the resolved
config written into every run directory round-trips through the same
parser, so a run is reproducible from that file and the seed alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import DropBlockConfig
from .errors import ConfigError
from .metrics import AGGREGATION_MODES
from .model import ModelConfig
from .training import TrainConfig

ENV_DATA_ROOT = "DRNET_DATA_ROOT"


@dataclass
class DataConfig:
    root: str = ""
    layout: str = "iostar"
    train_count: int = 20
    val_fraction: float = 0.1
    gt_threshold: int = 128


@dataclass
class EvalConfig:
    threshold: float = 0.5
    fov: bool = False
    aggregation: str = "pooled"

    def validate(self) -> None:
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"eval.threshold must lie in [0, 1), got {self.threshold}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"unknown eval.aggregation {self.aggregation!r}")


@dataclass
class RunConfig:
    seed: int = 42
    out_dir: str = "runs/drnet"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.data.layout not in ("iostar", "rcslo"):
            raise ConfigError(f"unknown data.layout {self.data.layout!r}")
        if not 0.0 < self.data.val_fraction < 1.0:
            raise ConfigError(
                f"data.val_fraction must lie in (0, 1), got {self.data.val_fraction}"
            )
        if self.data.train_count < 2:
            raise ConfigError(f"data.train_count must be >= 2, got {self.data.train_count}")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {text!r}")


# dotted key -> (caster, (object path, attribute))
_SCHEMA = {
    "seed": (int, ((), "seed")),
    "out_dir": (str, ((), "out_dir")),
    "data.root": (str, (("data",), "root")),
    "data.layout": (str, (("data",), "layout")),
    "data.train_count": (int, (("data",), "train_count")),
    "data.val_fraction": (float, (("data",), "val_fraction")),
    "data.gt_threshold": (int, (("data",), "gt_threshold")),
    "model.in_channels": (int, (("model",), "in_channels")),
    "model.initial_channels": (int, (("model",), "initial_channels")),
    "model.encoder_steps": (int, (("model",), "encoder_steps")),
    "model.input_size": (int, (("model",), "input_size")),
    "model.dropblock.block_size": (int, (("model", "dropblock"), "block_size")),
    "model.dropblock.keep_prob": (float, (("model", "dropblock"), "keep_prob")),
    "train.batch_size": (int, (("train",), "batch_size")),
    "train.epochs": (int, (("train",), "epochs")),
    "train.learning_rate": (float, (("train",), "learning_rate")),
    "train.optimizer": (str, (("train",), "optimizer")),
    "eval.threshold": (float, (("eval",), "threshold")),
    "eval.fov": (_parse_bool, (("eval",), "fov")),
    "eval.aggregation": (str, (("eval",), "aggregation")),
}

# Shorthand flags accepted on the command line.
ALIASES = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "learning_rate": "train.learning_rate",
    "threshold": "eval.threshold",
    "fov": "eval.fov",
    "layout": "data.layout",
    "data_root": "data.root",
    "out": "out_dir",
}


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key] = value
    return values


def normalize_key(key: str) -> str:
    key = key.replace("-", "_")
    return ALIASES.get(key, key)


def build_run_config(values: dict[str, str]) -> RunConfig:
    """Type-check and apply dotted key/value pairs onto a default RunConfig."""
    cfg = RunConfig()
    for raw_key, text in values.items():
        key = normalize_key(raw_key)
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {raw_key!r}")
        caster, (obj_path, attr) = _SCHEMA[key]
        target = cfg
        for part in obj_path:
            target = getattr(target, part)
        try:
            setattr(target, attr, caster(text))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    if not cfg.data.root:
        cfg.data.root = os.environ.get(ENV_DATA_ROOT, "")
    cfg.train.seed = cfg.seed
    cfg.validate()
    return cfg


def resolved_text(cfg: RunConfig) -> str:
    """Canonical serialization of every config key, parseable by this module."""
    lines = []
    for key in sorted(_SCHEMA):
        _, (obj_path, attr) = _SCHEMA[key]
        target = cfg
        for part in obj_path:
            target = getattr(target, part)
        value = getattr(target, attr)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_run_config(config_path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = parse_config_file(config_path) if config_path else {}
    if overrides:
        values.update(overrides)
    return build_run_config(values)
