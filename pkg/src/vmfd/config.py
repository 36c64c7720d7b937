"""Flat ``key = value`` config files with ``scene.``, ``train.``, ``sample.`` and ``model.`` sections.

Example::

    # comments start with '#'
    scene.seed = 3
    scene.class_frequencies = 0.5, 0.5
    train.epochs = 50
    sample.mode = dcas
    model.hidden = 32, 32

``sample.*`` and ``model.*`` keys are aliases for the matching training
fields; ``train.<field>`` works for every field as well.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .synthdata import SceneConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "MissingFieldError", "SECTIONS", "load_config", "parse_config",
           "scene_config", "stable_hash", "train_config"]

SECTIONS = ("scene", "train", "sample", "model")

# config key -> TrainConfig field for the non-"train." sections
_ALIASES = {
    "sample.mode": "sampling_mode",
    "sample.m_s": "m_s",
    "sample.bandwidth_mode": "bandwidth_mode",
    "sample.bandwidth": "bandwidth",
    "sample.kernel": "kernel",
    "model.hidden": "hidden",
    "model.c3d": "c3d",
    "model.c": "c",
    "model.train_2d_heads": "train_2d_heads",
    "model.kappa_max": "kappa_max",
}

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


class ConfigError(ValueError):
    pass


class MissingFieldError(ConfigError):
    def __init__(self, field: str):
        super().__init__(f"missing required field '{field}'")
        self.field = field


def parse_config(text: str) -> dict[str, str]:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        section = key.split(".", 1)[0]
        if "." not in key or section not in SECTIONS:
            raise ConfigError(f"line {lineno}: key '{key}' needs one of the prefixes "
                              + ", ".join(s + "." for s in SECTIONS))
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        entries[key] = value
    return entries


def load_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text)


def _scalar(raw: str, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low not in _TRUE + _FALSE:
            raise ValueError(raw)
        return low in _TRUE
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float) or like is None:
        return float(raw)
    return raw


def _convert(key: str, raw: str, default):
    try:
        if raw.lower() == "none":
            if default is None:
                return None
            raise ValueError(raw)
        if isinstance(default, tuple):
            like = default[0] if default else 0.0
            return tuple(_scalar(v.strip(), like) for v in raw.split(",") if v.strip())
        return _scalar(raw, default)
    except ValueError:
        raise ConfigError(f"invalid value for '{key}': {raw!r}") from None


def _build(cls, values: dict[str, tuple[str, str]]):
    names = {f.name for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for name, (key, raw) in values.items():
        if name not in names:
            raise ConfigError(f"unknown config key '{key}'")
        kwargs[name] = _convert(key, raw, getattr(defaults, name))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _check_required(entries, required, overrides):
    for key in required:
        if key not in entries and key.split(".", 1)[1] not in overrides:
            raise MissingFieldError(key)


def scene_config(entries: dict[str, str], required=("scene.seed",),
                 overrides: dict | None = None) -> SceneConfig:
    overrides = overrides or {}
    _check_required(entries, required, overrides)
    values = {k[len("scene."):]: (k, v) for k, v in entries.items() if k.startswith("scene.")}
    for name, value in overrides.items():
        values[name] = (f"--{name}", str(value))
    return _build(SceneConfig, values)


def train_config(entries: dict[str, str], required=("train.epochs", "train.seed"),
                 overrides: dict | None = None) -> TrainConfig:
    overrides = overrides or {}
    _check_required(entries, required, overrides)
    values = {}
    for key, raw in entries.items():
        if key.startswith("train."):
            values[key[len("train."):]] = (key, raw)
        elif key in _ALIASES:
            values[_ALIASES[key]] = (key, raw)
        elif not key.startswith("scene."):
            raise ConfigError(f"unknown config key '{key}'")
    for name, value in overrides.items():
        values[name] = (f"--{name}", str(value))
    return _build(TrainConfig, values)


def stable_hash(obj) -> str:
    """Short content hash of a JSON-serializable object (key order does not matter)."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
