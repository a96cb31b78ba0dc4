"""Portable JSON checkpoints with bit-exact float64 round-trips (hex-float strings)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError
from .model import ModelConfig, SMAttnModel

FORMAT = "smattn-checkpoint/1"


def to_dict(model: SMAttnModel, config: dict | None = None, seed: int | None = None) -> dict:
    params = {}
    for name in sorted(model.params):
        v = np.asarray(model.params[name].value, dtype=np.float64)
        params[name] = {"shape": list(v.shape), "values": [float(x).hex() for x in v.ravel()]}
    return {"format": FORMAT, "model": model.cfg.to_dict(), "params": params,
            "config": config or {}, "seed": seed}


def from_dict(d: dict) -> SMAttnModel:
    if d.get("format") != FORMAT:
        raise DataError(f"not a checkpoint document (format {d.get('format')!r})")
    cfg = ModelConfig.from_dict(d["model"])
    params = {}
    for name, entry in d["params"].items():
        vals = np.array([float.fromhex(x) for x in entry["values"]], dtype=np.float64)
        params[name] = Tensor(vals.reshape(entry["shape"]), requires_grad=True, name=name)
    return SMAttnModel(cfg, params)


def save(path, model: SMAttnModel, config: dict | None = None, seed: int | None = None):
    Path(path).write_text(json.dumps(to_dict(model, config, seed), indent=1, sort_keys=True) + "\n")


def load(path) -> tuple[SMAttnModel, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_dict(d), d
