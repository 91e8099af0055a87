"""Experiment configuration: INI-style files with sections, plus ``key=value`` overrides.

Example::

    [experiment]
    mode = scratch
    seed = 0

    [data]
    dataset = cifar10
    subset = 4000

    [controller]
    lambda = 0.15

Overrides address a key either as ``section.key`` or by its bare name when
that name is unique across sections (``lambda=0.2``).
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .controller import ControllerConfig
from .models import ConfigError, ModelSpec

DATASETS = ("mnist", "cifar10", "blobs")
MODES = ("scratch", "finetune")
SCRATCH_LR, FINETUNE_LR = 0.1, 0.01


@dataclass
class DataConfig:
    dataset: str = "cifar10"
    data_dir: Optional[str] = None
    subset: Optional[int] = None
    augment: bool = True
    padding: int = 4
    flip_prob: float = 0.5
    val_subset: Optional[int] = None
    blobs_classes: int = 4
    blobs_dims: int = 16
    blobs_train: int = 2000
    blobs_test: int = 1000
    blobs_separation: float = 6.0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"data.dataset: unknown dataset {self.dataset!r}; choose from {DATASETS}")


@dataclass
class TrainConfig:
    name: str = "adaqat"
    mode: str = "scratch"
    seed: int = 0
    out_dir: str = "runs/adaqat"
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    baseline_acc: Optional[float] = None
    epochs: int = 30
    batch_size: int = 128
    base_lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha_weight_decay: bool = True
    save_every: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"experiment.mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "scratch" and self.checkpoint:
            raise ConfigError("experiment.checkpoint: scratch mode must not load a checkpoint")
        if self.mode == "finetune" and not self.checkpoint:
            raise ConfigError("experiment.checkpoint: finetune mode requires an FP32 checkpoint")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.base_lr is not None and self.base_lr <= 0:
            raise ConfigError(f"train.base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")

    @property
    def lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return SCRATCH_LR if self.mode == "scratch" else FINETUNE_LR

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        data = DataConfig(**d.pop("data", {}))
        model = ModelSpec(**d.pop("model", {}))
        ctrl = ControllerConfig(**d.pop("controller", {}))
        return cls(data=data, model=model, controller=ctrl, **d)


# section -> (dataclass, attribute path on TrainConfig, field names or None for all)
_EXPERIMENT_KEYS = ("name", "mode", "seed", "out_dir", "checkpoint", "resume", "baseline_acc")
_TRAIN_KEYS = ("epochs", "batch_size", "base_lr", "momentum", "weight_decay", "alpha_weight_decay", "save_every")
_SECTIONS = {
    "experiment": (TrainConfig, None, _EXPERIMENT_KEYS),
    "train": (TrainConfig, None, _TRAIN_KEYS),
    "data": (DataConfig, "data", None),
    "model": (ModelSpec, "model", None),
    "controller": (ControllerConfig, "controller", None),
}
_ALIASES = {"lambda": "lam"}


def _fields(cls, names) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        if names is not None and f.name not in names:
            continue
        if f.name in ("data", "model", "controller") and cls is TrainConfig:
            continue
        out[f.name] = hints[f.name]
    return out


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if raw.lower() in ("", "none", "null"):
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin is typing.Literal:
        if raw not in args:
            raise ConfigError(f"{key}: {raw!r} is not one of {args}")
        return raw
    if origin in (list, Sequence):
        return [_coerce(p, args[0], key) for p in raw.split(",") if p.strip()]
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _locate(key: str) -> tuple[str, str]:
    """Resolve ``section.key`` or a unique bare key to (section, field)."""
    if "." in key:
        section, name = key.split(".", 1)
        name = _ALIASES.get(name, name)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        cls, _, names = _SECTIONS[section]
        if name not in _fields(cls, names):
            raise ConfigError(f"unknown config key {key!r}")
        return section, name
    name = _ALIASES.get(key, key)
    hits = [s for s, (cls, _, names) in _SECTIONS.items() if name in _fields(cls, names)]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"config key {key!r} is ambiguous; qualify it as one of "
                          + ", ".join(f"{s}.{key}" for s in hits))
    return hits[0], name


def parse_overrides(items: Sequence[str]) -> list[tuple[str, str]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        out.append((k.strip(), v))
    return out


def build_config(values: dict[tuple[str, str], str]) -> TrainConfig:
    """Assemble a TrainConfig from raw string values keyed by (section, field)."""
    groups: dict[str, dict[str, Any]] = {"top": {}, "data": {}, "model": {}, "controller": {}}
    for (section, name), raw in values.items():
        cls, attr, names = _SECTIONS[section]
        tp = _fields(cls, names)[name]
        groups[attr or "top"][name] = _coerce(raw, tp, f"{section}.{name}")
    try:
        data = DataConfig(**groups["data"])
        model = ModelSpec(**groups["model"])
        ctrl = ControllerConfig(**groups["controller"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return TrainConfig(data=data, model=model, controller=ctrl, **groups["top"])


def read_config_values(path) -> dict[tuple[str, str], str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            values[_locate(f"{section}.{key}")] = raw
    return values


def load_config(path=None, overrides: Sequence[str] = ()) -> TrainConfig:
    values = read_config_values(path) if path is not None else {}
    for key, raw in parse_overrides(overrides):
        values[_locate(key)] = raw
    return build_config(values)


def with_overrides(cfg: TrainConfig, overrides: Sequence[str]) -> TrainConfig:
    """Return a copy of ``cfg`` with string overrides applied."""
    d = cfg.to_dict()
    for key, raw in parse_overrides(overrides):
        section, name = _locate(key)
        cls, attr, names = _SECTIONS[section]
        val = _coerce(raw, _fields(cls, names)[name], f"{section}.{name}")
        if attr:
            d[attr][name] = val
        else:
            d[name] = val
    try:
        return TrainConfig.from_dict(d)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
