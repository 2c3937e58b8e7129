"""Flat ``section.key=value`` pipeline configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, get_args, get_origin, get_type_hints

from .dataset import SyntheticWorldConfig
from .errors import ConfigError
from .evaluation import MLPConfig
from .fusion import AlignmentConfig
from .similarity import MiningPolicy
from .text import SkipGramConfig
from .visual import EncoderConfig


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    epsilon: float = 1e-8
    poi_normalize: bool = False
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    cluster_k: int = 3
    indicator: str = "population_density"


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    mining: MiningPolicy = field(default_factory=MiningPolicy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text: SkipGramConfig = field(default_factory=SkipGramConfig)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    eval: MLPConfig = field(default_factory=MLPConfig)

    SECTIONS = ("run", "world", "mining", "encoder", "text", "align", "eval")

    # per-stage seed offsets keep streams independent under one global seed
    def with_seed(self, seed: int) -> "PipelineConfig":
        cfg = dataclasses.replace(self)
        cfg.run = dataclasses.replace(self.run, seed=seed)
        cfg.world = dataclasses.replace(self.world, seed=seed)
        cfg.mining = dataclasses.replace(self.mining, seed=seed + 1)
        cfg.encoder = dataclasses.replace(self.encoder, seed=seed + 2)
        cfg.text = dataclasses.replace(self.text, seed=seed + 3)
        cfg.align = dataclasses.replace(self.align, seed=seed + 4)
        cfg.eval = dataclasses.replace(self.eval, seed=seed + 5)
        return cfg

    def items(self) -> list[tuple[str, Any]]:
        out = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())

    def set(self, key: str, raw: str) -> None:
        if "." not in key:
            raise ConfigError(f"config key {key!r} must look like section.name")
        section, name = key.split(".", 1)
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        hints = get_type_hints(type(obj))
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _parse(hints[name], raw, key))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return ""
    return str(value)


def _parse(hint, raw: str, key: str):
    raw = raw.strip()
    origin = get_origin(hint)
    args = get_args(hint)
    try:
        if origin is tuple:
            parts = [p for p in raw.split(",") if p.strip()]
            inner = args[0]
            return tuple(_parse(inner, p, key) for p in parts)
        if type(None) in args:
            if raw == "":
                return None
            hint = next(a for a in args if a is not type(None))
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
