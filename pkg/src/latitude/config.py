"""Run configuration: nested dataclasses loaded from JSON with strict keys."""

from __future__ import annotations

import dataclasses
import json
import typing
import zlib
from dataclasses import dataclass
from dataclasses import field as _field
from pathlib import Path

import numpy as np

from .localizer import LocalizerConfig, TDLFConfig
from .regressor import AugmentConfig, RegressorConfig
from .scene import SceneConfig, TrajectoryConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    objects: SceneConfig = _field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = _field(default_factory=TrajectoryConfig)
    n_train: int = 100
    n_test: int = 20
    width: int = 96
    height: int = 96
    fov_deg: float = 60.0
    step_size: float = 0.1


@dataclass
class FieldSection:
    depth: int = 4
    width: int = 64
    pos_bands: int = 8
    dir_bands: int = 4
    app_dim: int = 4


@dataclass
class ExperimentSection:
    positions: int = 4
    seeds_per_position: int = 5
    levels_t: tuple = (0.025, 0.05, 0.075, 0.10)
    levels_r: tuple = (4.0, 8.0, 12.0, 16.0)
    ablate_levels: tuple = (0, 1, 2, 3)
    sweep_level: int = 1
    alpha0_fractions: tuple = (0.0, 0.1, 0.3, 0.4, 0.5, 0.7)


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneSection = _field(default_factory=SceneSection)
    field: FieldSection = _field(default_factory=FieldSection)
    train: TrainConfig = _field(default_factory=TrainConfig)
    regressor: RegressorConfig = _field(default_factory=RegressorConfig)
    localizer: LocalizerConfig = _field(default_factory=LocalizerConfig)
    experiments: ExperimentSection = _field(default_factory=ExperimentSection)

    def to_dict(self) -> dict:
        return to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def stream(self, name: str) -> np.random.Generator:
        """Independent generator per named stage, derived from the root seed."""
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {_join(path, unknown[0])!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = _dataclass_in(hints[f.name])
        if sub is not None and value is not None:
            value = _build(sub, value, _join(path, f.name))
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def _dataclass_in(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    for arg in typing.get_args(hint):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def _join(path, name):
    return f"{path}.{name}" if path else name


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path=None, overrides=()) -> RunConfig:
    data = to_plain(RunConfig())
    if path is not None:
        _merge(data, json.loads(Path(path).read_text()), "")
    for item in overrides:
        key, value = parse_override(item)
        set_path(data, key, value)
    return from_dict(data)


def _merge(base: dict, new: dict, path: str):
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {_join(path, k)!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, _join(path, k))
        else:
            base[k] = v


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.lstrip("-")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def set_path(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        if node[p] is None:
            node[p] = {}
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        if not (isinstance(node, dict) and node == {}):
            raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


__all__ = [
    "AugmentConfig",
    "ConfigError",
    "ExperimentSection",
    "FieldSection",
    "RunConfig",
    "SceneSection",
    "TDLFConfig",
    "from_dict",
    "load_config",
]
