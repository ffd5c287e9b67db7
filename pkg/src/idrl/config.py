"""Run configuration: one TOML file, one section per concern, every default defined here."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .envs import ENV_IDS


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass
class RunSection:
    seed: int = 0
    steps: int = 100_000
    warmup: int = 1000
    eval_interval: int = 5000
    eval_episodes: int = 10
    buffer_size: int = 1_000_000


@dataclass
class EnvSection:
    id: str = "chain"
    params: dict = field(default_factory=dict)


@dataclass
class DelaySection:
    delay: int = 2
    aux_delay: int = -1  # -1: min(1, delay)
    n_step: int = 0      # 0: max(1, delay - aux_delay)

    def resolved(self) -> tuple[int, int, int]:
        aux = min(1, self.delay) if self.aux_delay < 0 else self.aux_delay
        n = max(1, self.delay - aux) if self.n_step == 0 else self.n_step
        return self.delay, aux, n


@dataclass
class AgentSection:
    alpha: float = 0.2
    polyak: float = 0.995
    lr: float = 3e-4
    batch_size: int = 256
    actor_hidden: list = field(default_factory=lambda: [256, 256])
    critic_hidden: list = field(default_factory=lambda: [256, 256])
    updates_per_step: int = 1
    gamma: float = 0.0  # 0: use the environment's discount


@dataclass
class DiscSection:
    lr: float = 3e-4
    hidden: list = field(default_factory=lambda: [64, 64])
    lambda_gp: float = 10.0
    lambda_ent: float = 1e-3
    delta: float = 1e-7
    batch_size: int = 256
    updates_per_step: int = 1


@dataclass
class ExpertSection:
    path: str = ""
    n_traj: int = 100
    train_steps: int = 50_000
    stochastic: bool = False


@dataclass
class BcSection:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 256
    hidden: list = field(default_factory=lambda: [64, 64])
    eval_interval: int = 10


@dataclass
class CertifySection:
    seed: int = 0
    n_random: int = 100
    max_states: int = 6
    max_actions: int = 3
    delays: list = field(default_factory=lambda: [1, 2, 3])
    suites: list = field(default_factory=lambda: ["chain", "grid5"])
    suite_max_delay: int = 2
    gamma: float = 0.9


@dataclass
class Config:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    delay: DelaySection = field(default_factory=DelaySection)
    agent: AgentSection = field(default_factory=AgentSection)
    disc: DiscSection = field(default_factory=DiscSection)
    expert: ExpertSection = field(default_factory=ExpertSection)
    bc: BcSection = field(default_factory=BcSection)
    certify: CertifySection = field(default_factory=CertifySection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path):
        Path(path).write_text(self.to_toml())

    def replace(self, **sections) -> "Config":
        """Copy with per-section field overrides, e.g. ``cfg.replace(run={"steps": 0})``."""
        data = self.to_dict()
        for name, values in sections.items():
            data[name].update(values)
        return from_dict(data)


def _coerce(section: str, name: str, default: Any, value: Any) -> Any:
    where = f"[{section}].{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array, got {value!r}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a table, got {value!r}")
        return dict(value)
    return value


def from_dict(data: dict) -> Config:
    cfg = Config()
    unknown = set(data) - {f.name for f in dataclasses.fields(Config)}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    for sec_field in dataclasses.fields(Config):
        values = data.get(sec_field.name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{sec_field.name}] must be a table")
        section = getattr(cfg, sec_field.name)
        names = {f.name for f in dataclasses.fields(section)}
        bad = set(values) - names
        if bad:
            raise ConfigError(f"unknown key(s) in [{sec_field.name}]: {', '.join(sorted(bad))}")
        for k, v in values.items():
            setattr(section, k, _coerce(sec_field.name, k, getattr(section, k), v))
    validate(cfg)
    return cfg


def validate(cfg: Config):
    r, d = cfg.run, cfg.delay
    if cfg.env.id not in ENV_IDS:
        raise ConfigError(f"[env].id {cfg.env.id!r} is not one of {', '.join(ENV_IDS)}")
    if r.steps < 0 or r.warmup < 0:
        raise ConfigError("[run].steps and [run].warmup must be non-negative")
    if r.eval_interval < 1 or r.eval_episodes < 1 or r.buffer_size < 1:
        raise ConfigError("[run].eval_interval, eval_episodes and buffer_size must be positive")
    if d.delay < 0:
        raise ConfigError("[delay].delay must be non-negative")
    delay, aux, n = d.resolved()
    if not 0 <= aux <= delay:
        raise ConfigError(f"[delay].aux_delay={aux} must lie in [0, delay={delay}]")
    if n < 1:
        raise ConfigError("[delay].n_step must be >= 1")
    a = cfg.agent
    if not 0.0 <= a.polyak <= 1.0:
        raise ConfigError("[agent].polyak must lie in [0, 1]")
    if a.alpha < 0 or a.lr <= 0 or a.batch_size < 1 or a.updates_per_step < 0:
        raise ConfigError("[agent] alpha >= 0, lr > 0, batch_size >= 1, updates_per_step >= 0 required")
    if a.gamma != 0.0 and not 0.0 < a.gamma < 1.0:
        raise ConfigError("[agent].gamma must be 0 (env default) or inside (0, 1)")
    ds = cfg.disc
    if ds.lambda_gp < 0 or ds.lambda_ent < 0 or ds.delta < 0:
        raise ConfigError("[disc] lambda_gp, lambda_ent and delta must be non-negative")
    if ds.lr <= 0 or ds.batch_size < 1 or ds.updates_per_step < 0:
        raise ConfigError("[disc] lr > 0, batch_size >= 1, updates_per_step >= 0 required")
    for name, widths in (("agent.actor_hidden", a.actor_hidden), ("agent.critic_hidden", a.critic_hidden),
                         ("disc.hidden", ds.hidden), ("bc.hidden", cfg.bc.hidden)):
        if not all(isinstance(w, int) and not isinstance(w, bool) and w > 0 for w in widths):
            raise ConfigError(f"[{name}] must be a list of positive integers")
    if cfg.expert.n_traj < 0 or cfg.expert.train_steps < 0:
        raise ConfigError("[expert] n_traj and train_steps must be non-negative")
    if cfg.bc.epochs < 0 or cfg.bc.lr <= 0 or cfg.bc.batch_size < 1 or cfg.bc.eval_interval < 1:
        raise ConfigError("[bc] epochs >= 0, lr > 0, batch_size >= 1, eval_interval >= 1 required")
    c = cfg.certify
    if c.n_random < 0 or c.max_states < 2 or c.max_actions < 1:
        raise ConfigError("[certify] n_random >= 0, max_states >= 2, max_actions >= 1 required")
    if not all(isinstance(k, int) and k >= 0 for k in c.delays):
        raise ConfigError("[certify].delays must be non-negative integers")
    if not 0.0 < c.gamma < 1.0:
        raise ConfigError("[certify].gamma must lie inside (0, 1)")
    for s in c.suites:
        if s not in ("chain", "grid5"):
            raise ConfigError(f"[certify].suites entry {s!r} is not a tabular env id")
    # building the env surfaces bad parameter overrides early
    from .envs import make_env
    try:
        make_env(cfg.env.id, **cfg.env.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[env].params invalid for {cfg.env.id!r}: {exc}") from exc


def load_config(path, seed_from_env: bool = True) -> Config:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    cfg = from_dict(data)
    if seed_from_env and os.environ.get("IDRL_SEED"):
        try:
            cfg.run.seed = int(os.environ["IDRL_SEED"])
        except ValueError as exc:
            raise ConfigError(f"IDRL_SEED must be an integer, got {os.environ['IDRL_SEED']!r}") from exc
    return cfg
