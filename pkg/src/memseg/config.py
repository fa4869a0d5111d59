from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError

VARIANTS = ("baseline", "decoder_a", "decoder_b", "ensemble")


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one named consumer of the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


@dataclass
class ModelConfig:
    num_classes: int = 5
    channels: tuple = (16, 32, 64, 64)
    embed_dim: int = 32
    pool_grids: tuple = (1, 2, 3, 6)
    ppm_dim: int = 16
    # which stride-8 feature feeds the memory transform and the relation query
    rep_source: str = "bottleneck"
    temporal_len: int = 2
    # let saved stage masks replace Decoder B's first-pass guidance
    b_stage_feedback: bool = False
    train_encoder: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be four positive ints, got {self.channels}")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even, got {self.embed_dim}")
        if self.rep_source not in ("bottleneck", "context"):
            raise ConfigError(f"rep_source must be 'bottleneck' or 'context', got {self.rep_source!r}")
        if self.temporal_len < 1:
            raise ConfigError("temporal_len must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class MemoryConfig:
    momentum: float = 0.1
    mode: str = "constant"
    power: float = 0.9
    # 'upsample' resizes features to the label grid; 'nearest' shrinks labels instead
    transform_mode: str = "upsample"

    def validate(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.mode not in ("constant", "poly"):
            raise ConfigError(f"momentum mode must be constant or poly, got {self.mode!r}")
        if self.transform_mode not in ("upsample", "nearest"):
            raise ConfigError(f"transform_mode must be upsample or nearest, got {self.transform_mode!r}")


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.5, 2.0)
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1

    def validate(self) -> None:
        lo, hi = self.scale_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ConfigError(f"bad scale range {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 4
    crop: tuple = (64, 64)
    warmup_fraction: float = 0.2
    # after warm-up Decoder A is guided by the previous frame's 'gt' or a live 'prediction'
    guidance: str = "gt"
    first_pass_weight: float = 0.4
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.crop[0] % 32 or self.crop[1] % 32 or min(self.crop) < 32:
            raise ConfigError(f"crop dims must be positive multiples of 32, got {self.crop}")
        if self.guidance not in ("gt", "prediction"):
            raise ConfigError(f"guidance must be gt or prediction, got {self.guidance!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


MULTI_SCALES = (0.75, 1.0, 1.25, 1.5, 1.75)
SINGLE_SCALE = (1.0,)


@dataclass
class InferenceConfig:
    scales: tuple = MULTI_SCALES
    flip: bool = False
    stages: int = 0

    def validate(self) -> None:
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be nonempty and positive, got {self.scales}")
        if self.stages < 0:
            raise ConfigError(f"stages must be >= 0, got {self.stages}")


@dataclass
class RunConfig:
    variant: str = "decoder_a"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for part in (self.model, self.memory, self.augment, self.train, self.inference):
            part.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "config")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected a boolean")
            kwargs[name] = value
        elif isinstance(current, (int, float)) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            if isinstance(current, int) and not isinstance(current, bool) and isinstance(value, float):
                if not value.is_integer():
                    raise ConfigError(f"{where}.{name}: expected an integer")
                value = int(value)
            kwargs[name] = type(current)(value)
        else:
            if not isinstance(value, type(current)):
                raise ConfigError(f"{where}.{name}: expected {type(current).__name__}")
            kwargs[name] = value
    return cls(**kwargs)
