"""Experiment configuration: an INI-style file with [model], [train] and [paths].

Unknown sections or keys are rejected outright. Command-line ``--set
section.key=value`` overrides are applied on top of the file.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from typing import Sequence

from .model import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


MODEL_KEYS = {
    "channels": _ints, "strides": _ints, "stage_convs": int, "reduction": int,
    "pai": str, "smar": str, "cmwr": str, "igf": str, "zero_heads": _bool, "seed": int,
}
TRAIN_KEYS = {
    "lr": float, "decay_every": int, "decay_factor": float, "batch_size": int,
    "epochs": int, "seed": int, "scales": _ints, "augment": _bool,
}
PATH_KEYS = {"data": str, "out": str}
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "paths": PATH_KEYS}


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)


def _parse_items(items: dict[str, dict[str, str]]) -> Config:
    parsed: dict[str, dict] = {}
    for section, values in items.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        keys = SECTIONS[section]
        out = {}
        for key, raw in values.items():
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                out[key] = keys[key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
        parsed[section] = out
    try:
        model = ModelConfig(**parsed.get("model", {}))
        train = TrainConfig(**parsed.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not train.scales:
        raise ConfigError("[train] scales must not be empty")
    return Config(model, train, parsed.get("paths", {}))


def load_config(path=None, overrides: Sequence[str] = ()) -> Config:
    """Read ``path`` (optional) and apply ``section.key=value`` overrides."""
    items: dict[str, dict[str, str]] = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            items[section] = dict(cp.items(section))
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        lhs, value = ov.split("=", 1)
        section, key = lhs.split(".", 1)
        items.setdefault(section.strip(), {})[key.strip()] = value.strip()
    return _parse_items(items)


def dump_config(cfg: Config) -> str:
    """Serialise ``cfg`` back to the file format (round-trips through load_config)."""
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    lines = ["[model]"]
    lines += [f"{f.name} = {fmt(getattr(cfg.model, f.name))}" for f in fields(cfg.model)]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {fmt(getattr(cfg.train, f.name))}" for f in fields(cfg.train)]
    if cfg.paths:
        lines += ["", "[paths]"] + [f"{k} = {v}" for k, v in cfg.paths.items()]
    return "\n".join(lines) + "\n"
