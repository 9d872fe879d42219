"""Training configuration and its flat dotted-key file format."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .env.simulator import GoalConfig
from .errors import ConfigurationError
from .estimator import VrbConfig
from .policy import PpoConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class NetConfig:
    policy_hidden: tuple = (64, 64)
    value_hidden: tuple = (64, 64)
    encoder_hidden: tuple = (64,)
    head_hidden: tuple = (64,)
    policy_output_bias: float = 0.0


@dataclass(frozen=True)
class EnvConfig:
    schema_path: str = ""  # empty: built-in toy world
    corpus_path: str = ""  # empty: generate the expert corpus in memory
    corpus_sessions: int = 1000
    corpus_seed: int = 0
    turn_cap: int = 20
    goal: GoalConfig = field(default_factory=GoalConfig)


@dataclass(frozen=True)
class TrainConfig:
    vrb: VrbConfig = field(default_factory=VrbConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    policy_lr: float = 1e-4
    value_lr: float = 1e-4
    estimator_lr: float = 1e-4
    # listed in the hyperparameter table but unused: the user simulator is rule-based
    user_simulator_lr: float = 1e-3
    iterations: int = 300
    sessions_per_iteration: int = 16
    estimator_steps: int = 1
    reward_centering: bool = False  # subtract the batch mean of r-hat before advantage estimation
    absorbing_padding: bool = True  # pad finished episodes to the turn cap with an absorbing transition
    eval_every: int = 50
    eval_sessions: int = 100
    seed: int = 0
    variant: str = "vrb"

    def __post_init__(self):
        if self.variant not in ("vrb", "airl"):
            raise ConfigurationError(f"variant must be 'vrb' or 'airl', got {self.variant!r}")
        if self.iterations < 0 or self.sessions_per_iteration < 1:
            raise ConfigurationError("iterations must be >= 0 and sessions_per_iteration >= 1")


def to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = to_dict(v) if is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def flat_items(obj, prefix: str = "") -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.update(flat_items(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(current, value, key):
    if isinstance(current, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, int):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        return tuple(int(v) for v in value)
    return str(value)


def with_overrides(cfg, overrides: dict):
    """Apply ``{"vrb.phi": 0.01, ...}``; unknown keys are rejected."""
    known = flat_items(cfg)
    for key in overrides:
        if key not in known:
            raise ConfigurationError(f"unknown configuration key {key!r}")

    def build(obj, prefix):
        changes = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if is_dataclass(v):
                changes[f.name] = build(v, key + ".")
            elif key in overrides:
                changes[f.name] = _coerce(v, overrides[key], key)
        try:
            return replace(obj, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    return build(cfg, "")


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        tree = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{p}: {exc}") from exc
    return with_overrides(base or TrainConfig(), _flatten(tree))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, v in flat_items(cfg).items():
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, (int, float)):
            text = repr(v)
        elif isinstance(v, tuple):
            text = "[" + ", ".join(str(x) for x in v) + "]"
        else:
            text = '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def from_dict(data: dict) -> TrainConfig:
    return with_overrides(TrainConfig(), _flatten(data))

