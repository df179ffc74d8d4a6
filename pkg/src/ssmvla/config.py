"""Run configuration: dataclass defaults, JSON overrides, strict keys.

A config file is a JSON object with any subset of the sections below;
unknown sections or keys are rejected outright so that a typo cannot
silently fall back to a default. The full resolved config is echoed into
every output artifact for provenance.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .policy import PolicyConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass
class DataConfig:
    n_episodes: int = 250
    seed: int = 0
    dir: str = "data"
    n_distractors: int = 2
    expert_noise: float = 0.01


@dataclass
class EvalConfig:
    n_rollouts: int = 50
    max_steps: int = 160
    seed: int = 1000
    execute_steps: int | None = None  # None = execute the full chunk


@dataclass
class BenchConfig:
    lengths: list = field(default_factory=lambda: [256, 512, 1024, 2048, 4096])
    repeats: int = 3


@dataclass
class RunConfig:
    model: PolicyConfig = field(default_factory=PolicyConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def echo(self):
        return dataclasses.asdict(self)


_SECTIONS = {
    "model": PolicyConfig,
    "training": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}


def _build_section(cls, overrides, where):
    if not isinstance(overrides, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    try:
        return cls(**overrides)
    except TypeError as e:
        raise ConfigError(f"bad value in section {where!r}: {e}") from e


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {name: _build_section(cls, d.get(name, {}), name)
              for name, cls in _SECTIONS.items()}
    return RunConfig(**kwargs)


def load(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return from_dict(raw)
