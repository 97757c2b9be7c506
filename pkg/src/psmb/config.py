"""Training configuration: nested dataclasses with TOML load/save.

The file layout mirrors the dataclass nesting, one table per section:

    [encoder]  depth, d, n, patch_size
    [views]    resolutions, view counts, crop and photometric ranges
    [mpa]      positional mode and offset-net settings
    [distill]  prototype count, temperatures, schedules
    [optim]    plain-GD settings
    [run]      seed and logging cadence

Missing keys fall back to the defaults below; unknown keys are rejected so a
typo cannot silently train the wrong model.  Saving is deterministic, which
makes the config digest usable as a checkpoint compatibility stamp.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict

import tomli

from .distill import DistillConfig
from .mpa import MpaConfig
from .ssm import EncoderConfig
from .views import ViewConfig


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.05
    lr_min: float = 0.0
    epochs: int = 20
    batch_size: int = 12
    clip_norm: float = 5.0
    # decoupled decay on weight matrices and the head; without it the head
    # norm grows freely, the effective temperature drops, and the prototype
    # assignments collapse to a handful of winners
    weight_decay: float = 0.04


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    log_every: int = 1
    save_every: int = 0   # steps between snapshots; 0 = final checkpoint only


def _tiny_encoder() -> EncoderConfig:
    return EncoderConfig(depth=4, d=64, n=8, patch_size=4)


def _tiny_views() -> ViewConfig:
    return ViewConfig(res={"G": 32, "M": 20, "L": 12})


@dataclass(frozen=True)
class TrainConfig:
    """Defaults describe the desk-scale recipe: 64 px images, 32/20/12 px
    views on a 4 px patch, so token grids are 8x8, 5x5 and 3x3."""

    encoder: EncoderConfig = field(default_factory=_tiny_encoder)
    views: ViewConfig = field(default_factory=_tiny_views)
    mpa: MpaConfig = field(default_factory=MpaConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)


_SECTIONS = {
    "encoder": EncoderConfig,
    "views": ViewConfig,
    "mpa": MpaConfig,
    "distill": DistillConfig,
    "optim": OptimConfig,
    "run": RunConfig,
}

_TUPLE_KEYS = {("views", "aspect")}
_TUPLE_DICT_KEYS = {("views", "area")}


# -- TOML emission -----------------------------------------------------------

def _fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    if isinstance(v, dict):
        inner = ", ".join(f"{k} = {_fmt_value(x)}" for k, x in v.items())
        return "{ " + inner + " }"
    raise TypeError(f"cannot emit {type(v).__name__} as TOML")


def config_to_toml(config: TrainConfig) -> str:
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        block = getattr(config, section)
        for f in fields(block):
            lines.append(f"{f.name} = {_fmt_value(getattr(block, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(path, config: TrainConfig) -> None:
    Path(path).write_text(config_to_toml(config))


# -- TOML parsing ------------------------------------------------------------

def _build_section(section: str, table: Dict[str, Any]):
    cls = _SECTIONS[section]
    allowed = {f.name for f in fields(cls)}
    kw = {}
    for key, value in table.items():
        if key not in allowed:
            raise ValueError(f"unknown key {key!r} in [{section}]")
        if (section, key) in _TUPLE_KEYS:
            value = tuple(value)
        elif (section, key) in _TUPLE_DICT_KEYS:
            value = {k: tuple(v) for k, v in value.items()}
        kw[key] = value
    return cls(**kw)


def config_from_dict(data: Dict[str, Any]) -> TrainConfig:
    for section in data:
        if section not in _SECTIONS:
            raise ValueError(f"unknown section [{section}]")
    kw = {s: _build_section(s, t) for s, t in data.items()}
    return TrainConfig(**kw)


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(p, "rb") as fh:
        data = tomli.load(fh)
    return config_from_dict(data)


def config_digest(config: TrainConfig) -> str:
    """Hex sha256 of the canonical TOML text; stable across processes."""
    return hashlib.sha256(config_to_toml(config).encode()).hexdigest()


def validate_config(config: TrainConfig) -> None:
    """Cross-field checks that individual dataclasses cannot perform."""
    patch = config.encoder.patch_size
    for tag, r in config.views.res.items():
        if r % patch:
            raise ValueError(
                f"view {tag}: resolution {r} not divisible by patch {patch}")
    # epochs = 0 and lr = 0 are legal (no-op loop, frozen-parameter step)
    if config.optim.epochs < 0 or config.optim.batch_size <= 0:
        raise ValueError("epochs must be >= 0 and batch_size positive")
    if config.optim.lr < 0:
        raise ValueError("lr must be nonnegative")
    if config.optim.weight_decay < 0:
        raise ValueError("weight_decay must be nonnegative")
