"""Experiment configuration files.

One TOML file per experiment with sections ``[train]``, ``[model]``,
``[weights]`` and ``[dataset]`` plus top-level ``name``, ``out_dir``,
``seed`` and ``wall_clock``. Missing keys take their defaults and unknown
keys are rejected. :func:`write_resolved` writes every field back out, so
a run directory is self-describing.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli
import tomli_w

from ..datasets import RingDistribution, SyntheticConfig
from ..losses import LossWeights
from ..models import ModelConfig
from ..trainers import TrainRunConfig

DATASET_KINDS = ("ring", "synthetic", "directory")


class ConfigError(ValueError):
    """Invalid configuration. ``field`` is the dotted key at fault."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    path: str = ""
    manifest: str = ""
    ring_center: tuple = (100.0, 100.0)
    ring_radius: float = 10.0
    ring_sigma: float = 0.25
    num_classes: int = 10
    per_class: int = 500
    side: int = 32
    data_seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "directory" and not self.path:
            raise ConfigError("dataset.path", "a directory dataset needs a path")

    @property
    def scale(self) -> str:
        return "toy2d" if self.kind == "ring" else "image"

    def ring(self) -> RingDistribution:
        return RingDistribution(tuple(self.ring_center), self.ring_radius, self.ring_sigma)

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(self.num_classes, self.per_class, self.side, self.data_seed,
                               self.test_fraction)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    out_dir: str = "runs/experiment"
    seed: int = 0
    wall_clock: bool = False
    train: TrainRunConfig = field(default_factory=TrainRunConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        # the experiment seed is the only seed; keep the train copy in sync
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if self.dataset.scale != self.model.scale:
            raise ConfigError("dataset.kind", f"{self.dataset.kind!r} data needs model.scale "
                                              f"{self.dataset.scale!r}, got {self.model.scale!r}")


_SECTIONS = {"train": TrainRunConfig, "model": ModelConfig, "weights": LossWeights,
             "dataset": DatasetConfig}
_TOP = ("name", "out_dir", "seed", "wall_clock")
_SKIP = {("train", "seed")}


def _coerce(section: str, f: dataclasses.Field, value):
    where = f"{section}.{f.name}" if section else f.name
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(where, f"expected a list, got {type(value).__name__}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or (default is None and "float" in str(f.type)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    return value


def _build(section: str, cls, table) -> object:
    if not isinstance(table, dict):
        raise ConfigError(section, "expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls) if (section, f.name) not in _SKIP}
    unknown = sorted(set(table) - set(fields))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    kwargs = {k: _coerce(section, fields[k], v) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(section, str(e)) from None


def from_dict(doc: dict) -> ExperimentConfig:
    unknown = sorted(set(doc) - set(_TOP) - set(_SECTIONS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    top_fields = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name in _TOP}
    top = {k: _coerce("", top_fields[k], doc[k]) for k in _TOP if k in doc}
    parts = {name: _build(name, cls, doc.get(name, {})) for name, cls in _SECTIONS.items()}
    return ExperimentConfig(**top, **parts)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("", f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError("", f"{path}: {e}") from None
    return from_dict(doc)


def section_to_dict(name: str, obj) -> dict:
    table = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if (name, f.name) in _SKIP or v is None:
            continue
        table[f.name] = list(v) if isinstance(v, tuple) else v
    return table


def section_from_dict(name: str, table: dict):
    return _build(name, _SECTIONS[name], table)


def to_dict(cfg: ExperimentConfig) -> dict:
    """Every field, defaults included. ``None`` values are omitted (TOML has no null)."""
    doc = {k: getattr(cfg, k) for k in _TOP}
    for name in _SECTIONS:
        doc[name] = section_to_dict(name, getattr(cfg, name))
    return doc


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir) / "config.resolved.toml"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(cfg), encoding="utf-8", newline="\n")
    return out


def digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:16]


def with_overrides(cfg: ExperimentConfig, out: str | None = None, seed: int | None = None,
                   iterations: int | None = None) -> ExperimentConfig:
    train = cfg.train if iterations is None else replace(cfg.train, max_iterations=iterations)
    return replace(cfg, out_dir=out if out is not None else cfg.out_dir,
                   seed=seed if seed is not None else cfg.seed, train=train)

