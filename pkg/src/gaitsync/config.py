"""Versioned pipeline configuration.

The document is JSON with a ``version`` field and one section per module.
Sections map onto the modules' parameter dataclasses; any key not known to
the schema is rejected with its dotted location.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .adgc import ModelDims
from .icfp import IcfpParams
from .registration import RegistrationParams
from .sync import OffsetLabeling, SyncSettings
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimSettings:
    duration: float = 3.0
    n_cameras: int = 6
    fps: float = 15.0
    delay_per_frame: float = 0.002
    jitter: float = 0.0005
    noise_sigma: float = 0.3
    n_points: int = 2000
    length_variation: float = 0.03
    width_variation: float = 0.05


@dataclass(frozen=True)
class GraphSettings:
    icfp: IcfpParams = IcfpParams()
    knn: int = 4
    max_nodes: int = 0  # 0 keeps every persistent node


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 42
    sim: SimSettings = SimSettings()
    graph: GraphSettings = GraphSettings()
    labeling: OffsetLabeling = OffsetLabeling()
    model: ModelDims = ModelDims(hidden_dim=32, attention_dim=32)
    train: TrainConfig = TrainConfig()
    sync: SyncSettings = SyncSettings()
    registration: RegistrationParams = RegistrationParams()
    eval_min_cameras: int = 3

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        return config_hash(self)

    def replace(self, **overrides) -> PipelineConfig:
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.epochs": 3})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown key {key!r}")
            node[parts[-1]] = value
        return config_from_dict(d)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            loc = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown key {loc!r}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        loc = f"{where}.{name}" if where else name
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, loc)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{loc}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{loc}: expected true or false")
            kwargs[name] = value
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{loc}: expected an integer")
            kwargs[name] = value
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{loc}: expected a number")
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, NotImplementedError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    version = data.get("version", CONFIG_VERSION) if isinstance(data, dict) else None
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version!r} is not supported (expected {CONFIG_VERSION})")
    cfg = _build(PipelineConfig, data, "")
    if cfg.labeling.T != cfg.train.T or cfg.labeling.C != cfg.train.C:
        raise ConfigError("labeling and train must agree on T and C")
    if cfg.model.n_classes != cfg.labeling.C:
        raise ConfigError("model.n_classes must equal labeling.C")
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]
