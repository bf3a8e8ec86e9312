"""Run configuration: defaults, ``key = value`` files and seeded sub-streams.

Keys are dotted ``section.field`` names, e.g. ``env.fee_rate = 0.0025``.
Precedence is command-line flags over the config file over the defaults.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .data import SplitSpec
from .env import EnvConfig
from .nn.forecaster import TrainSchedule
from .ppo.trainer import PpoConfig
from .strategies import StrategyParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    train_fraction: float = 0.7
    valid_fraction: float = 0.1
    test_fraction: float = 0.2
    time_step: int = 10
    adf_lag: int = 0

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.train_fraction, self.valid_fraction, self.test_fraction)


@dataclass(frozen=True)
class ForecasterConfig:
    hidden: int = 50
    layers: int = 4
    dropout: float = 0.2
    batch_size: int = 32
    initial_lr: float = 0.001
    max_epochs: int = 300
    lr_patience: int = 5
    lr_factor: float = 0.2
    stop_patience: int = 10
    grid_epochs: int = 60

    @property
    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.initial_lr, self.max_epochs, self.lr_patience, self.lr_factor,
                             self.stop_patience, self.batch_size)


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "out"
    jobs: int = 1


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    strategy: StrategyParams = field(default_factory=StrategyParams)

    def sections(self) -> list[str]:
        return [f.name for f in fields(self)]


def _coerce(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a new config with dotted-key overrides applied and validated."""
    updates: dict[str, dict[str, Any]] = {}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in cfg.sections() or not name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, section)
        names = {f.name for f in fields(current)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(current, name)
        updates.setdefault(section, {})[name] = _coerce(value, default, key) if isinstance(value, str) \
            else value
    try:
        new_sections = {s: replace(getattr(cfg, s), **u) for s, u in updates.items()}
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, **new_sections)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        cfg = apply_overrides(cfg, parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in cfg.sections():
        obj = getattr(cfg, section)
        lines.append(f"# {section}")
        for f in fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{section}.{f.name} = {v!r}" if isinstance(v, float) else f"{section}.{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named component, derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def subseed(seed: int, name: str) -> int:
    """Integer seed for APIs that take one, drawn from the named sub-stream."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])
