"""Experiment configuration: JSON files, defaults and command-line overrides.

Precedence is flag > file > default. Every block is a dataclass whose field
defaults are the documented defaults; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentSpec
from .classifier import CNNConfig
from .continual import RunConfig, StrategyConfig
from .dataio import DatasetConfig, dsa_config, pamap2_config, synthetic_config
from .objectives import SSLConfig
from .sslnet import TransformerConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


@dataclass(frozen=True)
class ModelBlock:
    transformer: TransformerConfig = TransformerConfig()
    cnn: CNNConfig = CNNConfig()


@dataclass(frozen=True)
class RunBlock:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    cache: str = "cache"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("run.seeds must list at least one seed")
        RunConfig(self.epochs, self.batch_size, self.lr)

    def for_seed(self, seed: int) -> RunConfig:
        return RunConfig(self.epochs, self.batch_size, self.lr, seed)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=synthetic_config)
    model: ModelBlock = ModelBlock()
    ssl: SSLConfig = SSLConfig()
    strategy: StrategyConfig = StrategyConfig()
    run: RunBlock = RunBlock()

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if isinstance(value, DatasetConfig) else _plain(dataclasses.asdict(value))
        return out


_DATASET_FACTORIES = {"synthetic": synthetic_config, "pamap2": pamap2_config, "dsa": dsa_config}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{path}.{name}" if path else name)
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def dataset_from_dict(data: dict) -> DatasetConfig:
    if not isinstance(data, dict):
        raise ConfigError("dataset: expected an object")
    data = dict(data)
    kind = data.pop("kind", "synthetic")
    if kind not in _DATASET_FACTORIES:
        raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_FACTORIES)}, got {kind!r}")
    names = {f.name for f in dataclasses.fields(DatasetConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in dataset: {', '.join(unknown)}")
    if kind == "synthetic":
        allowed = set(synthetic_config().synthetic)
        extra = sorted(set(data.get("synthetic", {})) - allowed)
        if extra:
            raise ConfigError(f"unknown key(s) in dataset.synthetic: {', '.join(extra)}")
    elif data.get("synthetic"):
        raise ConfigError("dataset.synthetic only applies to kind 'synthetic'")
    try:
        return _DATASET_FACTORIES[kind](**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected an object")
    unknown = sorted(set(data) - {f.name for f in dataclasses.fields(ExperimentConfig)})
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name not in data:
            continue
        if f.name == "dataset":
            kwargs["dataset"] = dataset_from_dict(data["dataset"])
        else:
            kwargs[f.name] = _build(typing.get_type_hints(ExperimentConfig)[f.name], data[f.name], f.name)
    return ExperimentConfig(**kwargs)


def parse_override(text: str) -> tuple[list[str], object]:
    """``block.key=value``; the value is read as JSON and falls back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like block.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    return parts, value


def apply_overrides(data: dict, overrides: list[tuple[list[str], object]]) -> dict:
    data = json.loads(json.dumps(data))
    for parts, value in overrides:
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {'.'.join(parts)} goes through a non-object value")
        node[parts[-1]] = value
    return data


def load_config(path: str | Path | None = None, overrides: list[tuple[list[str], object]] = ()) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path`` (if any), then ``overrides``."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return config_from_dict(apply_overrides(data, list(overrides)))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


__all__ = [
    "AugmentSpec",
    "ConfigError",
    "ExperimentConfig",
    "ModelBlock",
    "RunBlock",
    "apply_overrides",
    "config_from_dict",
    "dataset_from_dict",
    "dump_config",
    "load_config",
    "parse_override",
]
