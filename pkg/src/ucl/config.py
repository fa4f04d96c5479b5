"""Run configuration (``run.json``) with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .encoders import VisualEncoderConfig
from .errors import ConfigError
from .synthdata import DataConfig

MODES = ("deep_fusion", "split_head", "sup_only", "vl_only")


@dataclass(frozen=True)
class TextConfig:
    """Text encoder settings; the vocabulary size comes from the built vocabulary."""

    max_len: int = 32
    width: int = 64
    depth: int = 2
    heads: int = 4
    pooling: str = "mean"


@dataclass(frozen=True)
class ModelConfig:
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    text: TextConfig = field(default_factory=TextConfig)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: float = 5.0


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 1500
    warmup_frac: float = 0.05
    lr_min: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    ratio: tuple[int, int] = (1, 1)
    tau: float = 0.05
    learnable_tau: bool = False
    symmetric: bool = False
    ckpt_every: int = 100


@dataclass(frozen=True)
class FewShotConfig:
    shots: int = 1
    steps: int = 50
    lr: float = 1e-3
    init: str = "text_generated"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    mode: str = "deep_fusion"
    enriched: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.model.visual.out_dim <= 0:
            raise ConfigError("out_dim must be positive")
        if self.model.visual.image_size != self.data.image_size:
            raise ConfigError("model.visual.image_size must equal data.image_size")
        if self.schedule.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if not 0.0 <= self.schedule.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.optim.clip <= 0:
            raise ConfigError("clip must be positive")
        if self.train.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.fewshot.init not in ("text_generated", "random_init"):
            raise ConfigError("fewshot.init must be text_generated or random_init")
        self.model.visual.validate()
        self.data.validate()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, raw: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    for name, value in raw.items():
        factory = fields[name].default_factory
        nested = factory() if factory is not dataclasses.MISSING else None
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(nested):
            kwargs[name] = _build(type(nested), value, path)
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
        _check_type(hints[name], kwargs[name], path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _check_type(hint: str, value: Any, path: str) -> None:
    hint = str(hint)
    if hint == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{path} must be a boolean")
    if hint == "int" and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path} must be an integer")
    if hint == "float" and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{path} must be a number")
    if hint == "str" and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string")


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def load_data_config(path: str | Path | None) -> DataConfig:
    if path is None:
        return DataConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = _build(DataConfig, raw, "data")
    cfg.validate()
    return cfg
