"""Dataclass configs and the layered loader (defaults -> file -> ``key=value`` overrides)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    token_dim: int = 192
    depth: int = 4
    heads: int = 3
    patch_size: int = 16
    mlp_ratio: float = 4.0
    norm: str = "layer"
    head_features: int = 64
    gs_feature_dim: int = 16
    camera_head_layers: int = 2
    s_max: float = 0.05
    max_grid: int = 64
    prior_embedding: str = "single_token"

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("backbone depth must be >= 1")
        if self.prior_embedding not in ("single_token", "dense"):
            raise ConfigError(f"prior_embedding must be single_token|dense, got {self.prior_embedding!r}")
        if self.norm not in ("layer", "none"):
            raise ConfigError(f"norm must be layer|none, got {self.norm!r}")


@dataclass
class LossWeights:
    points: float = 1.0
    depth: float = 1.0
    cam: float = 5.0
    normal: float = 1.0
    gs: float = 1.0
    lpips: float = 0.05
    gsdepth: float = 0.1
    consis: float = 0.1
    alpha: float = 0.2
    angle: float = 1.0
    huber_delta: float = 0.1
    conf_quantile: float = 0.3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


@dataclass
class RenderConfig:
    voxel_size: float = 0.01
    split_candidates: int = 4
    visibility_tol: float = 0.03
    dilation: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    mode: str = "auto"
    use_predicted_cameras: bool = False


@dataclass
class ResolutionPolicy:
    min_pixels: int = 100_000
    max_pixels: int = 250_000
    aspect_min: float = 0.5
    aspect_max: float = 2.0
    multiplier: float = 1.0

    def __post_init__(self):
        if self.min_pixels > self.max_pixels:
            raise ConfigError("resolution policy: min_pixels > max_pixels")
        if not (0 < self.aspect_min <= self.aspect_max):
            raise ConfigError("resolution policy: aspect bounds must be positive and ordered")
        if self.multiplier <= 0:
            raise ConfigError("resolution policy: multiplier must be positive")


@dataclass
class StageConfig:
    name: str
    epochs: int
    active_heads: list
    frozen_groups: list = field(default_factory=list)
    trainable_modules: list = field(default_factory=list)
    data_mix: dict = field(default_factory=lambda: {"synthetic": 1.0})
    resolution_multiplier: float = 1.0

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError(f"stage {self.name}: epochs must be > 0")


def default_stages() -> list:
    return [
        StageConfig("prior_core", 20, ["point", "depth", "camera"], resolution_multiplier=0.5),
        StageConfig("add_normal", 10, ["point", "depth", "camera", "normal"]),
        StageConfig("gs_only", 10, ["gs"], trainable_modules=["gs_head", "gs_attr"]),
    ]


@dataclass
class CurriculumPlan:
    stages: list = field(default_factory=default_stages)
    group_lrs: dict = field(default_factory=lambda: {"patch_embed": 2e-5, "core": 1e-4, "new": 2e-4})
    lr_scale: float = 1.0
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.05
    grad_clip: float = 1.0


@dataclass
class DataConfig:
    views: int = 3
    height: int = 32
    width: int = 32
    policy: ResolutionPolicy = field(default_factory=lambda: ResolutionPolicy(
        min_pixels=1024, max_pixels=1024, aspect_min=1.0, aspect_max=1.0))
    dynamic_resolution: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    plan: CurriculumPlan = field(default_factory=CurriculumPlan)
    data: DataConfig = field(default_factory=DataConfig)
    prior_dropout_p: float = 0.5
    seed: int = 0
    checkpoint_every: int = 200
    log_every: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _build(cls, data: Any):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, val in data.items():
        if key not in hints:
            raise ConfigError(f"unknown config key {cls.__name__}.{key}")
        default = _default(hints[key])
        if key == "stages":
            kwargs[key] = [s if isinstance(s, StageConfig) else _build(StageConfig, s) for s in val]
        elif dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), val)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(val)
        else:
            kwargs[key] = val
    return cls(**kwargs)


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, val in update.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    val = yaml.safe_load(raw)
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = val
    return node


def load_config(path: str | Path | None = None, overrides: list | None = None,
                base: RunConfig | None = None) -> RunConfig:
    data = (base or RunConfig()).to_dict()
    if path is not None:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        data = _merge(data, doc)
    for item in overrides or []:
        data = _merge(data, _parse_override(item))
    try:
        return _build(RunConfig, data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)
