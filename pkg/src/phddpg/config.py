"""Typed experiment configuration stored as an INI file.

Each section maps onto one dataclass; every key is optional and falls back to the
dataclass default. Unknown sections or keys are validation errors so typos do not
silently change an experiment.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .agent import MASK_STRATEGIES, AgentConfig
from .controllers import VARIANTS
from .sim import SimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "offline"
    seed: int = 0
    horizon: int = 3600
    collect_episodes: int = 30
    train_episodes: int = 40
    steps_per_episode: int = 360
    online_episodes: int = 100
    warmup_episodes: int = 2
    report_last: int = 10
    eval_seeds: str = "0"

    def eval_seed_list(self) -> list[int]:
        return [int(s) for s in self.eval_seeds.replace(",", " ").split()]


@dataclass(frozen=True)
class VariantConfig:
    name: str = "full"
    conservative_margin: float = 5.0


@dataclass(frozen=True)
class BaselinesConfig:
    fixed_time_duration: float = 30.0
    max_pressure_duration: float = 20.0


@dataclass(frozen=True)
class ScenarioConfig:
    rows: int = 1
    cols: int = 1
    link_length: float = 300.0
    demand: float = 2400.0
    seed: int = 0
    ns_share: float = 0.5
    phase_scheme: str = "paired"
    roadnet: str = ""
    flow: str = ""


SECTIONS = {
    "sim": SimConfig,
    "agent": AgentConfig,
    "train": TrainConfig,
    "variant": VariantConfig,
    "baselines": BaselinesConfig,
    "scenario": ScenarioConfig,
}


@dataclass(frozen=True)
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    baselines: BaselinesConfig = field(default_factory=BaselinesConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def replace(self, section: str, **changes) -> "Config":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "Config":
        a, s, t = self.agent, self.sim, self.train
        if a.mask not in MASK_STRATEGIES:
            raise ConfigError(f"agent.mask must be one of {MASK_STRATEGIES}, got {a.mask!r}")
        if self.variant.name not in VARIANTS:
            raise ConfigError(f"variant.name must be one of {VARIANTS}, got {self.variant.name!r}")
        if t.mode not in ("online", "offline"):
            raise ConfigError(f"train.mode must be online or offline, got {t.mode!r}")
        if not 0 < a.x_min < a.x_max:
            raise ConfigError("agent duration bounds need 0 < x_min < x_max")
        if (a.x_min, a.x_max) != (s.x_min, s.x_max):
            raise ConfigError("agent and sim duration bounds differ")
        if not 0 <= a.alpha <= 1 or not 0 <= a.tau <= 1 or not 0 <= a.gamma <= 1:
            raise ConfigError("alpha, tau and gamma must lie in [0, 1]")
        if a.batch_size < 1 or a.buffer_capacity < a.batch_size or a.policy_delay < 1:
            raise ConfigError("need batch_size >= 1, buffer_capacity >= batch_size, policy_delay >= 1")
        if t.horizon <= 0:
            raise ConfigError("train.horizon must be positive")
        if not t.eval_seed_list():
            raise ConfigError("train.eval_seeds is empty")
        return self


def _fmt(value) -> str:
    return str(value).lower() if isinstance(value, bool) else str(value)


def _coerce(section: str, key: str, raw: str, typ):
    try:
        if typ is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        return typ(raw.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {typ.__name__}") from None


def parse_config(text: str, source: str = "<string>") -> Config:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    parts = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = SECTIONS[section]
        hints = get_type_hints(cls)
        values = {}
        for key, raw in cp[section].items():
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _coerce(section, key, raw, hints[key])
        parts[section] = cls(**values)
    return Config(**parts).validate()


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
