"""One YAML file per run.  Precedence: command-line flags > file > defaults.

Documented keys (every section optional)::

    env:    EnvConfig fields (num_steps, impressions_mean, num_agents, budget,
            cpa_limit, value_alpha, value_beta, sparse_mode, sparse_scale,
            lambda_max, budget_jitter, seed)
    data:   episodes, seed, variant (S1/S2/S3)
    model:  ModelConfig fields (layers, heads, width, context, max_timestep,
            state_dim, alpha_r, tau, loss_weights)
    train:  TrainConfig fields (batch_size, max_steps, learning_rate,
            weight_decay, grad_clip, seed, checkpoint_every, variant, dtype)
    eval:   EvalConfig fields (budget_ratios, rounds, target_rtg_quantile,
            variant, seed, roster_seed)
    suite:  seeds (list of training seeds), select_checkpoint
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .evaluation import EvalConfig, config_hash
from .model import ModelConfig
from .score import Variant
from .sim import EnvConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    episodes: int = 200
    seed: int = 1
    variant: str = "S2"

    def __post_init__(self):
        Variant(self.variant)
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SuiteConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    select_checkpoint: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("suite needs at least one seed")

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "select_checkpoint": self.select_checkpoint}


def default_train_config() -> TrainConfig:
    # desk defaults used for every experiment in this package
    return TrainConfig(batch_size=64, max_steps=10_000, learning_rate=3e-4, dtype="float32", checkpoint_every=500)


def default_model_config() -> ModelConfig:
    return ModelConfig(context=9)


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=default_model_config)
    train: TrainConfig = field(default_factory=default_train_config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in _SECTIONS}

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _section(cls, base, overrides: dict | None):
    d = base.to_dict()
    for k, v in (overrides or {}).items():
        if k not in d:
            raise ConfigError(f"unknown key {cls.__name__}.{k}")
        d[k] = v
    if hasattr(cls, "from_dict"):
        return cls.from_dict(d)
    return cls(**d)


_SECTIONS = {"env": EnvConfig, "data": DataConfig, "model": ModelConfig, "train": TrainConfig,
             "eval": EvalConfig, "suite": SuiteConfig}


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    """Apply a nested ``{section: {key: value}}`` dict on top of ``base``."""
    unknown = set(overrides) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        sec = overrides.get(name)
        if sec is not None and not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        try:
            parts[name] = _section(cls, getattr(base, name), sec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} config: {exc}") from None
    return RunConfig(**parts)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        cfg = merge(cfg, doc or {})
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg
