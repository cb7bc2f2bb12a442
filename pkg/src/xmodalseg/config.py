"""JSON run configuration with strict keys and hyperparameter defaults."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .losses import DycrossConfig
from .training import TrainConfig
from .treefilter import GuideSource

SCHEMA_VERSION = 1
DEFAULT_GRID = ((False, False), (True, False), (False, True), (True, True))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_dir: str = ""
    test_dir: str = ""
    n_train: int = 32
    n_test: int = 8


@dataclass(frozen=True)
class AblationConfig:
    seeds: int = 3
    grid: tuple = DEFAULT_GRID


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dycross: DycrossConfig = field(default_factory=DycrossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"]["guide_source"] = self.train.guide_source.value
        d["ablation"]["grid"] = [list(g) for g in self.ablation.grid]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - {"schema_version", "train", "dycross", "data", "ablation"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    for name in ("train", "dycross", "data", "ablation"):
        if not isinstance(data.get(name, {}), dict):
            raise ConfigError(f"section '{name}' must be an object")
    train = dict(data.get("train", {}))
    if "guide_source" in train:
        try:
            train["guide_source"] = GuideSource(train["guide_source"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    abl = dict(data.get("ablation", {}))
    if "grid" in abl:
        abl["grid"] = tuple((bool(a), bool(b)) for a, b in abl["grid"])
    return RunConfig(
        train=_section(TrainConfig, train, "train"),
        dycross=_section(DycrossConfig, data.get("dycross", {}), "dycross"),
        data=_section(DataConfig, data.get("data", {}), "data"),
        ablation=_section(AblationConfig, abl, "ablation"),
    )


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)
