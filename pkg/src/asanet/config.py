"""Experiment configuration: one YAML file, strict keys, paper defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossConfig
from .training import ModelConfig, OptimizerConfig, ScheduleConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"
    root: str = "data/synthetic"
    width: int = 640
    height: int = 192
    num_train: int = 50
    num_val: int = 10
    moving_fraction: float = 0.7
    train_split: str = "eigen_train"
    val_split: str = "eigen_val"
    test_split: str = "eigen_test"
    split_dir: str | None = None
    flip: bool = False
    color_jitter: bool = False
    scenes: dict | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "kitti"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'kitti', got {self.kind!r}")
        if self.width % 32 or self.height % 32:
            raise ConfigError(f"image size {self.width}x{self.height} must be divisible by 32")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v
        return plain(dataclasses.asdict(self))

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(d: dict | None) -> ExperimentConfig:
    d = dict(d or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs = {name: _build(cls, d.pop(name), name) for name, cls in _SECTIONS.items() if name in d}
    return ExperimentConfig(**kwargs, **d)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))
