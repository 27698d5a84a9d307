"""Run configuration: nested dataclasses loaded from YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .contrastive import PretrainConfig
from .continual import FisherConfig
from .oodsplit import SplitConfig
from .predictor import HeadConfig

OUT_ENV = "TABCL_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = ""
    target: str = ""
    task: str = "classification"
    kinds: dict[str, str] = field(default_factory=dict)
    drop: list[str] = field(default_factory=list)
    norm: str | None = "l2"
    standardize: bool = True
    max_rows: int | None = None
    holdout_fraction: float = 0.2


@dataclass
class ContrastiveConfig:
    hidden: int = 256
    latent: int = 128
    projection: int = 64
    temperature: float = 0.1
    reconstruction: bool = False
    train: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass
class ContinualConfig:
    lam: float = 100.0
    gamma: float = 10.0
    floor: float = 1e-3
    s_in_size: int | None = None
    s_ood_size: int | None = None
    fisher: FisherConfig = field(default_factory=FisherConfig)
    train: PretrainConfig = field(default_factory=lambda: PretrainConfig(epochs=10))


@dataclass
class PredictorConfig:
    head: HeadConfig = field(default_factory=HeadConfig)
    refit_after_continual: bool = True


@dataclass
class BaselineConfig:
    hidden: int = 256
    train: HeadConfig = field(default_factory=lambda: HeadConfig(epochs=50, lr=1e-3))


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    detector: SplitConfig = field(default_factory=SplitConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _strip_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def from_dict(cls, data: dict | None, where: str = ""):
    """Build dataclass ``cls`` from a nested mapping, rejecting unknown keys."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = _strip_optional(hints[key])
        if dataclasses.is_dataclass(tp) and isinstance(value, dict):
            value = from_dict(tp, value, f"{where}.{key}".lstrip("."))
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path: str | Path, *, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Read and validate a YAML run config.

    Relative data paths resolve against the config file's directory.  The
    output directory comes from ``out``, else $TABCL_OUT, else the file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    raw = yaml.safe_load(path.read_text()) or {}
    cfg = from_dict(RunConfig, raw)
    if cfg.data.path and not Path(cfg.data.path).is_absolute():
        cfg.data.path = str((path.parent / cfg.data.path).resolve())
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    elif os.environ.get(OUT_ENV):
        cfg.out = os.environ[OUT_ENV]
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not cfg.data.path:
        raise ConfigError("data.path is required")
    if not Path(cfg.data.path).is_file():
        raise ConfigError(f"data file {cfg.data.path} does not exist")
    if not cfg.data.target:
        raise ConfigError("data.target is required")
    if cfg.data.task not in ("classification", "regression"):
        raise ConfigError(f"data.task must be classification or regression, got {cfg.data.task!r}")
    if cfg.data.norm not in (None, "l1", "l2"):
        raise ConfigError(f"data.norm must be l1, l2 or null, got {cfg.data.norm!r}")
    if not 0.0 < cfg.data.holdout_fraction < 1.0:
        raise ConfigError("data.holdout_fraction must lie in (0, 1)")
    if cfg.continual.lam < 0 or cfg.continual.gamma < 0:
        raise ConfigError("continual.lam and continual.gamma must be nonnegative")
