"""Layered run configuration: defaults < YAML file < ``section.key=value`` overrides."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable

import yaml

from .losses import LossWeights
from .metrics import D_VALUES, P_VALUES, R_VALUES
from .net import ModelConfig
from .pipeline import InferConfig, TrainConfig
from .synth import WorldSpec

ENV_VAR = "LANEVEC_CONFIG"


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    world = WorldSpec().to_dict()
    return {
        "world": world,
        "model": asdict(ModelConfig()),
        "train": asdict(TrainConfig()),
        "loss": asdict(LossWeights()),
        "infer": asdict(InferConfig()),
        "eval": {"d_values": list(D_VALUES), "r_values": list(R_VALUES), "p_values": list(P_VALUES)},
    }


def _merge(base: dict, layer: dict, where: str = "") -> None:
    if not isinstance(layer, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    for key, value in layer.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, path)
        else:
            base[key] = value


def parse_override(item: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}`` with the value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value for {key}: {exc}") from None
    out: dict = value
    for p in reversed(parts):
        out = {p: out}
    return out


def load_config(path=None, overrides: Iterable[str] = (), use_env: bool = True) -> dict:
    cfg = defaults()
    if path is None and use_env:
        path = os.environ.get(ENV_VAR) or None
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            layer = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        _merge(cfg, layer)
    for item in overrides:
        _merge(cfg, parse_override(item))
    validate(cfg)
    return cfg


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from None


def world_spec(cfg: dict) -> WorldSpec:
    try:
        spec = WorldSpec.from_dict(copy.deepcopy(cfg["world"]))
        spec.validate()
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid world config: {exc}") from None
    return spec


def model_config(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, cfg["model"], "model")


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"], "train")


def loss_weights(cfg: dict) -> LossWeights:
    return _build(LossWeights, cfg["loss"], "loss")


def infer_config(cfg: dict) -> InferConfig:
    return _build(InferConfig, cfg["infer"], "infer")


def validate(cfg: dict) -> None:
    world_spec(cfg)
    model_config(cfg)
    train_config(cfg)
    loss_weights(cfg)
    infer_config(cfg)
    for key in ("d_values", "r_values", "p_values"):
        vals = cfg["eval"][key]
        if not isinstance(vals, list) or not vals or not all(isinstance(v, (int, float)) and v > 0 for v in vals):
            raise ConfigError(f"eval.{key} must be a non-empty list of positive numbers")


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(_plain(cfg), sort_keys=True, default_flow_style=None)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
