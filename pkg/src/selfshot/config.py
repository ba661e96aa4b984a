"""Experiment configuration: a TOML file with [data], [embed], [retrieve], [vis], [train], [eval].

Every key maps to a dataclass field; unknown sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .datagen import DataConfig
from .embed import EmbedConfig
from .vistr import VisConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection(DataConfig):
    root: str = "data"
    seed: int | None = None


@dataclass
class EmbedSection(EmbedConfig):
    seed: int | None = None


@dataclass
class RetrieveSection:
    k: int = 5
    exclude_self: bool = True
    pool_sizes: list[int] = field(default_factory=lambda: [100, 300, 1000])
    extras: list[int] = field(default_factory=lambda: [1, 3, 5])


@dataclass
class TrainSection:
    epochs: int = 5
    steps_per_epoch: int = 0
    grad_accum: int = 4
    lr: float = 5e-4
    lr_backbone: float = 0.0
    weight_decay: float = 1e-4
    lr_decay_epoch: int = 4
    clip_grad: float = 1.0
    k_choices: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    random_support_prob: float = 0.25
    pretrain_steps: int = 1500
    pretrain_batch: int = 8
    pretrain_lr: float = 1e-3
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.random_support_prob <= 1.0:
            raise ValueError("random_support_prob must be in [0, 1]")
        if self.pretrain_steps < 0 or self.pretrain_batch < 1:
            raise ValueError("pretrain_steps must be >= 0 and pretrain_batch >= 1")

    @classmethod
    def paper_scale(cls) -> "TrainSection":
        return cls(epochs=20, lr_decay_epoch=14, lr=1e-4, lr_backbone=1e-5)


@dataclass
class EvalSection:
    split: str = "test"
    iou_thresh: float = 0.5
    ks: list[int] = field(default_factory=lambda: [1, 5])
    semi_max: int = 5
    max_queries: int = 0
    seed: int | None = None


SECTIONS = {
    "data": DataSection,
    "embed": EmbedSection,
    "retrieve": RetrieveSection,
    "vis": VisConfig,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    retrieve: RetrieveSection = field(default_factory=RetrieveSection)
    vis: VisConfig = field(default_factory=VisConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def stream(self, name: str) -> int:
        """Seed of a named stream: the section's explicit seed, else derived from the master seed."""
        section = getattr(self, name, None)
        explicit = getattr(section, "seed", None)
        if explicit is not None:
            return int(explicit)
        return derive_seed(self.seed, name)

    def embed_config(self) -> EmbedConfig:
        return _strip(self.embed, EmbedConfig)

    def data_config(self) -> DataConfig:
        return _strip(self.data, DataConfig)


def derive_seed(master: int, name: str) -> int:
    return int(np.random.SeedSequence([int(master), zlib.crc32(name.encode())]).generate_state(1)[0])


def _strip(obj, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in asdict(obj).items() if k in names})


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{section}] section: {e}") from e


def from_dict(doc: dict, seed: int = 0) -> ExperimentConfig:
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {name: _build(cls, doc.get(name, {}), name) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**parts, seed=seed)


def load_config(path, seed: int = 0) -> ExperimentConfig:
    p = Path(path)
    try:
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from e
    return from_dict(doc, seed)


def config_hash_of_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
