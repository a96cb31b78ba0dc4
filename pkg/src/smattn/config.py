"""Run configuration: TOML files with sections, overridable by `section.key=value` strings."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Iterable

import tomli

from .errors import ConfigError
from .model import ModelConfig
from .regularizer import IntegratorConfig
from .simulate import SimConfig
from .train import TrainConfig

SECTIONS = ("run", "data", "simulate", "model", "train", "integrator", "eval",
            "ablate", "intensity", "bound", "gradcheck")

# keys holding file paths, resolved against the config file's directory
PATH_KEYS = {("data", "events"), ("data", "group_map"), ("data", "dataset"),
             ("eval", "checkpoint"), ("intensity", "checkpoint"), ("bound", "checkpoint")}

DEFAULTS = {
    "run": {},
    "data": {"format": "csv", "min_user_events": 2, "min_item_count": 1, "split_ratios": [8, 1, 1]},
    "simulate": {"kind": "drift"},
    "model": {},
    "train": {},
    "integrator": {},
    "eval": {"k": 10, "sampled_negatives": 0, "split": "test"},
    "ablate": {"seeds": [0, 1, 2, 3, 4], "arms": ["origin", "smlayer", "smlayer+ctreg"]},
    "intensity": {"points": 200, "strict": False},
    "bound": {"epsilon": 0.01, "delta": 0.05, "lipschitz": 1.0, "log_base": "e", "split": "test"},
    "gradcheck": {"eps": 1e-6, "tol": 1e-4, "users": 3, "length": 10, "negatives": 2,
                  "integrators": ["trapezoid", "monte_carlo"]},
}


def parse_value(text: str):
    """A TOML literal (number, bool, string, array, inline table); bare words become strings."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(cfg: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"override key {key!r} must be section.key with section in {SECTIONS}")
    cfg.setdefault(parts[0], {})[parts[1]] = parse_value(value.strip())


def load_config(path: str | Path | None, overrides: Iterable[str] = (), seed: int | None = None) -> dict:
    """Merge defaults, the file and overrides.

    Relative paths from the file resolve against its directory, those from
    overrides against the working directory.
    """
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = tomli.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.resolve().parent
        for section, values in raw.items():
            if section not in SECTIONS or not isinstance(values, dict):
                raise ConfigError(f"unknown config section [{section}]")
            cfg[section].update(values)
    _resolve_paths(cfg, base)
    for item in overrides:
        apply_override(cfg, item)
    # paths given on the command line are relative to the working directory
    _resolve_paths(cfg, Path.cwd())
    if seed is not None:
        cfg["run"]["seed"] = seed
    return cfg


def _resolve_paths(cfg: dict, base: Path):
    for section, key in PATH_KEYS:
        v = cfg[section].get(key)
        if v:
            cfg[section][key] = str((base / v).resolve())


def require_seed(cfg: dict) -> int:
    seed = cfg["run"].get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("a run seed is required (run.seed in the config or --seed)")
    return seed


def require_path(cfg: dict, section: str, key: str) -> Path:
    v = cfg[section].get(key)
    if not v:
        raise ConfigError(f"{section}.{key} is required for this command")
    p = Path(v)
    if not p.exists():
        raise ConfigError(f"{section}.{key}: {p} does not exist")
    return p


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{what}] {exc}") from exc


def sim_config(cfg: dict) -> SimConfig:
    values = {k: v for k, v in cfg["simulate"].items() if k not in ("kind", "rate", "mu", "alpha", "beta")}
    try:
        return SimConfig.from_flat(values)
    except TypeError as exc:
        raise ConfigError(f"[simulate] {exc}") from exc


def model_config(cfg: dict, n_items: int, groups=None) -> ModelConfig:
    values = dict(cfg["model"])
    values["n_items"] = n_items
    if groups is not None and values.get("groups") is None and values.pop("use_groups", False):
        values["groups"] = tuple(groups)
    values.pop("use_groups", None)
    if values.get("groups") is not None:
        values["groups"] = tuple(values["groups"])
    return _build(ModelConfig, values, "model")


def train_config(cfg: dict, seed: int) -> TrainConfig:
    values = dict(cfg["train"])
    values.setdefault("seed", seed)
    values["integrator"] = _build(IntegratorConfig, {"seed": seed, **cfg["integrator"]}, "integrator")
    return _build(TrainConfig, values, "train")
