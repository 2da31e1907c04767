"""Experiment configuration: TOML files, dotted overrides, presets and validation."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .agent import PpoConfig
from .env import ENVIRONMENTS, TimeLimitConfig, TimeMode, make_env
from .memory import EpisodicMemory, PrioritisedMemory, UniformMemory
from .orchestrator import EvalProtocol, Metric, TrainSetup

VARIANTS = ("none", "uniform", "prioritised", "episodic")


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass(frozen=True)
class RestartSection:
    ratio: float = 0.1
    alpha: float = 0.4
    eps: float = 1e-3
    time_mode: str = "fixed"
    T_aug: int = 10
    capacity: int = 20000
    parent_capacity: int = 100
    sub_capacity: int = 10


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 10
    period: int = 10000
    metric: str = "mean_return"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    variant: str
    total_steps: int
    seeds: tuple[int, ...]
    out_dir: str
    env: dict[str, Any]
    restart: RestartSection = field(default_factory=RestartSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    gate_steps: int = 0  # 0 disables the positive-reward run filter

    def to_dict(self) -> dict[str, Any]:
        ppo = asdict(self.ppo)
        ppo["hidden"] = list(ppo["hidden"])
        if ppo["max_grad_norm"] is None:
            ppo["max_grad_norm"] = 0.0
        return {
            "experiment": {
                "name": self.name,
                "variant": self.variant,
                "total_steps": self.total_steps,
                "seeds": list(self.seeds),
                "out_dir": self.out_dir,
                "gate_steps": self.gate_steps,
            },
            "env": dict(self.env),
            "restart": asdict(self.restart),
            "ppo": ppo,
            "eval": asdict(self.eval),
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @property
    def time_limit(self) -> TimeLimitConfig:
        mode = TimeMode(self.restart.time_mode)
        return TimeLimitConfig(int(self.env["T_env"]), mode, self.restart.T_aug if mode == TimeMode.FIXED else None)


def _section(cls, raw: dict[str, Any], prefix: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"{prefix}.{name}", "unknown field")
    values = {}
    defaults = cls()
    for name in known:
        default = getattr(defaults, name)
        if name not in raw:
            values[name] = default
            continue
        value = raw[name]
        try:
            if isinstance(default, bool):
                value = bool(value)
            elif isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
                value = int(value)
            elif isinstance(default, float):
                value = float(value)
            elif isinstance(default, tuple):
                value = tuple(int(v) for v in value)
            elif isinstance(default, str):
                value = str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{prefix}.{name}", f"cannot interpret {value!r} as {type(default).__name__}") from None
        values[name] = value
    return values


def _ppo(raw: dict[str, Any]) -> PpoConfig:
    raw = dict(raw)
    if raw.get("max_grad_norm") in (0, 0.0):
        raw["max_grad_norm"] = None
    known = {f.name for f in fields(PpoConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"ppo.{sorted(unknown)[0]}", "unknown field")
    values = {}
    base = PpoConfig()
    for name in known:
        if name not in raw:
            continue
        default = getattr(base, name)
        value = raw[name]
        try:
            if name == "hidden":
                value = tuple(int(v) for v in value)
            elif name == "max_grad_norm":
                value = None if value is None else float(value)
            elif isinstance(default, int):
                value = int(value)
            else:
                value = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"ppo.{name}", f"cannot interpret {value!r}") from None
        values[name] = value
    try:
        return PpoConfig(**values)
    except ValueError as exc:
        bad = str(exc).rsplit(":", 1)[-1].strip().split(",")[0]
        raise ConfigError(f"ppo.{bad}", "out of range") from None


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    unknown = set(raw) - {"experiment", "env", "restart", "ppo", "eval"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    exp = raw.get("experiment", {})
    for key in ("variant", "total_steps"):
        if key not in exp:
            raise ConfigError(f"experiment.{key}", "missing")
    unknown = set(exp) - {"name", "variant", "total_steps", "seeds", "out_dir", "gate_steps"}
    if unknown:
        raise ConfigError(f"experiment.{sorted(unknown)[0]}", "unknown field")
    variant = exp["variant"]
    if variant not in VARIANTS:
        raise ConfigError("experiment.variant", f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    try:
        total_steps = int(exp["total_steps"])
        seeds = tuple(int(s) for s in exp.get("seeds", [0]))
        gate_steps = int(exp.get("gate_steps", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError("experiment", str(exc)) from None
    if total_steps < 1:
        raise ConfigError("experiment.total_steps", "must be positive")
    if not seeds:
        raise ConfigError("experiment.seeds", "need at least one seed")
    if gate_steps < 0:
        raise ConfigError("experiment.gate_steps", "must be >= 0")

    env = dict(raw.get("env", {}))
    if env.get("name") not in ENVIRONMENTS:
        raise ConfigError("env.name", f"unknown environment {env.get('name')!r}; expected one of {', '.join(sorted(ENVIRONMENTS))}")
    if int(env.get("T_env", 0)) < 1:
        raise ConfigError("env.T_env", "must be a positive integer")

    restart = RestartSection(**_section(RestartSection, raw.get("restart", {}), "restart"))
    if not 0.0 <= restart.ratio < 1.0:
        raise ConfigError("restart.ratio", "must lie in [0, 1)")
    if restart.eps <= 0:
        raise ConfigError("restart.eps", "must be positive")
    if restart.alpha < 0:
        raise ConfigError("restart.alpha", "must be >= 0")
    if restart.time_mode not in {m.value for m in TimeMode}:
        raise ConfigError("restart.time_mode", f"expected 'fixed' or 'remaining', got {restart.time_mode!r}")
    if restart.time_mode == "fixed" and not 1 <= restart.T_aug <= int(env["T_env"]):
        raise ConfigError("restart.T_aug", "must satisfy 1 <= T_aug <= T_env")
    for key in ("capacity", "parent_capacity"):
        if getattr(restart, key) < 1:
            raise ConfigError(f"restart.{key}", "must be positive")
    if restart.sub_capacity < 0:
        raise ConfigError("restart.sub_capacity", "must be >= 0")
    if variant == "episodic" and restart.time_mode != "remaining":
        raise ConfigError("restart.time_mode", "episodic variant requires 'remaining'")
    if variant in ("uniform", "prioritised") and restart.time_mode != "fixed":
        raise ConfigError("restart.time_mode", f"{variant} variant requires 'fixed'")

    ev = EvalSection(**_section(EvalSection, raw.get("eval", {}), "eval"))
    if ev.metric not in {m.value for m in Metric}:
        raise ConfigError("eval.metric", f"expected 'mean_return' or 'success_rate', got {ev.metric!r}")
    if ev.episodes < 1 or ev.period < 1:
        raise ConfigError("eval.episodes" if ev.episodes < 1 else "eval.period", "must be positive")

    cfg = ExperimentConfig(
        name=str(exp.get("name", "experiment")),
        variant=variant,
        total_steps=total_steps,
        seeds=seeds,
        out_dir=str(exp.get("out_dir", "runs")),
        env=env,
        restart=restart,
        ppo=_ppo(raw.get("ppo", {})),
        eval=ev,
        gate_steps=gate_steps,
    )
    try:
        build_env(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError("env", str(exc)) from None
    return cfg


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, text = item.split("=", 1)
    path = key.strip().split(".")
    if len(path) != 2:
        raise ConfigError(key, "override key must be section.key")
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        value = text
    return path, value


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    raw = copy.deepcopy(raw)
    for item in overrides:
        (section, key), value = parse_override(item)
        raw.setdefault(section, {})[key] = value
    return raw


def load(path: str | Path | None = None, preset: str | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"not valid TOML: {exc}") from None
    elif preset is not None:
        raw = preset_dict(preset)
    else:
        raise ConfigError("config", "give a config file or a preset name")
    return from_dict(apply_overrides(raw, list(overrides)))


# presets --------------------------------------------------------------------

_BASES: dict[str, dict[str, Any]] = {
    "dense-corridor": {
        "experiment": {"total_steps": 61_440, "seeds": [0, 1, 2, 3, 4]},
        "env": {"name": "dense-corridor", "length": 200, "T_env": 1000},
        "restart": {"time_mode": "fixed", "T_aug": 10, "capacity": 20000, "alpha": 0.4},
        "ppo": {},
        "eval": {"episodes": 3, "period": 2048, "metric": "mean_return"},
    },
    "dense-corridor-hard": {
        "experiment": {"total_steps": 300_000, "seeds": [0, 1, 2, 3, 4]},
        "env": {"name": "dense-corridor", "length": 600, "T_env": 1000},
        "restart": {"time_mode": "fixed", "T_aug": 10, "capacity": 20000, "alpha": 0.4},
        "ppo": {},
        "eval": {"episodes": 3, "period": 20480, "metric": "mean_return"},
    },
    "multigoal": {
        "experiment": {"total_steps": 300_000, "seeds": list(range(10))},
        "env": {"name": "multigoal-grid", "size": 10, "T_env": 50},
        "restart": {"time_mode": "remaining", "parent_capacity": 100, "sub_capacity": 10, "alpha": 1.0},
        "ppo": {},
        "eval": {"episodes": 20, "period": 20480, "metric": "success_rate"},
    },
    "deep-maze": {
        "experiment": {"total_steps": 300_000, "seeds": [0, 1, 2, 3, 4]},
        "env": {"name": "deep-maze", "size": 30, "T_env": 100, "action_penalty": 0.001, "maze_seed": 0, "goal_distance": 26},
        "restart": {"time_mode": "remaining", "parent_capacity": 50, "sub_capacity": 10, "alpha": 1.0},
        "ppo": {"ent_coef": 0.02},
        "eval": {"episodes": 20, "period": 20480, "metric": "success_rate"},
    },
}
_ALIASES = {"multigoal-grid": "multigoal"}
_VARIANTS_FOR = {
    "dense-corridor": ("none", "uniform", "prioritised"),
    "dense-corridor-hard": ("none", "uniform", "prioritised"),
    "multigoal": ("none", "episodic"),
    "deep-maze": ("none", "episodic"),
}


def preset_names() -> list[str]:
    return [f"{base}-{v}" for base, vs in _VARIANTS_FOR.items() for v in vs]


def preset_dict(name: str) -> dict[str, Any]:
    base, _, variant = name.rpartition("-")
    base = _ALIASES.get(base, base)
    if base not in _BASES or variant not in _VARIANTS_FOR[base]:
        raise ConfigError("preset", f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    raw = copy.deepcopy(_BASES[base])
    raw["experiment"].update({"name": f"{base}-{variant}", "variant": variant, "out_dir": f"runs/{base}-{variant}"})
    if variant == "none":
        raw["restart"]["ratio"] = 0.0
    return raw


def preset(name: str) -> ExperimentConfig:
    return from_dict(preset_dict(name))


# builders -------------------------------------------------------------------

def build_env(cfg: ExperimentConfig):
    params = {k: v for k, v in cfg.env.items() if k != "name"}
    return make_env(cfg.env["name"], time_limit=cfg.time_limit, **params)


def build_memory(cfg: ExperimentConfig):
    r = cfg.restart
    if cfg.variant == "uniform":
        return UniformMemory(r.capacity, r.T_aug)
    if cfg.variant == "prioritised":
        return PrioritisedMemory(r.capacity, r.alpha, r.eps, r.T_aug)
    if cfg.variant == "episodic":
        return EpisodicMemory(r.parent_capacity, r.sub_capacity, int(cfg.env["T_env"]), r.alpha, r.eps)
    return None


def build_setup(cfg: ExperimentConfig) -> TrainSetup:
    return TrainSetup(
        make_env=lambda: build_env(cfg),
        make_memory=lambda: build_memory(cfg),
        ppo=cfg.ppo,
        ratio=cfg.restart.ratio,
        total_steps=cfg.total_steps,
        protocol=EvalProtocol(cfg.eval.episodes, cfg.eval.period, Metric(cfg.eval.metric)),
        config_digest=cfg.digest(),
        gate_steps=cfg.gate_steps or None,
    )
