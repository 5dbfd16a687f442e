"""Training configuration: one JSON document, unknown keys rejected.

Nested sections mirror the module parameter types (encoder, par,
loss_weights, dataset). `schedule_table` optionally overrides the built-in
dilation table; residue keys are strings in JSON.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .aspp import DEFAULT_SCHEDULE, DilationSchedule
from .encoder import EncoderConfig
from .losses import LossWeights
from .par import ParParams


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_images: int = 64
    height: int = 32
    width: int = 32


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    par: ParParams = field(default_factory=ParParams)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    num_classes: int = 2
    beta: float = 0.5              # CAM share in mask fusion
    cam_threshold: float = 0.25
    cam_normalize: bool = False
    cam_warmup_steps: int = 100
    ema_momentum: float = 0.99
    alpha_momentum: float = 0.5    # blend of previous vs refit CAM prototypes
    learning_rate: float = 0.05
    sgd_momentum: float = 0.9
    steps: int = 200
    batch_size: int = 8
    seed: int = 0
    aspp_on: bool = True
    par_on: bool = True
    losses_on: bool = True
    aspp_residual: bool = False
    flip_augment: bool = False
    schedule_table: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")
        if not 0.0 <= self.alpha_momentum < 1.0:
            raise ConfigError(f"alpha_momentum must be in [0, 1), got {self.alpha_momentum}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")

    def schedule(self) -> DilationSchedule:
        if self.schedule_table is None:
            return DEFAULT_SCHEDULE
        table = {int(k): tuple(v) for k, v in self.schedule_table.items()}
        return DilationSchedule(table)


_SECTIONS = {
    "encoder": EncoderConfig,
    "par": ParParams,
    "loss_weights": LossWeights,
    "dataset": DatasetSpec,
}


def _build(cls, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path or 'config'}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS and isinstance(value, dict):
            value = _build(_SECTIONS[key], value, f"{path}{key}.")
        elif key == "dilation_list" and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config document must be a JSON object, got {type(data).__name__}")
    return _build(TrainConfig, data, "")


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
