"""Run configuration: one JSON document, validated before any work starts.

Schema (all keys optional, defaults shown)::

    {
      "seed": 0,
      "detector": "toy",              # checkpoint path, or "toy" to train one on the fly
      "data": null,                   # manifest path; null = synthesize 200 scenes from seed
      "target": "builtin:sunset",     # artwork path or builtin:<name>; null allowed when beta = 0
      "patch_size": 32,
      "ratio": 0.3,
      "init": "from-target",
      "weights": {"alpha": 1, "beta": 8, "gamma": 0.5, "sim_metric": "cosine", "tv_reduction": "mean"},
      "eot": {"scale": true, "rotation": true, "noise": true, "contrast": true, "brightness": true,
              "scale_range": [0.8, 1.2], "max_angle": 20, "noise_amp": 0.1,
              "contrast_range": [0.8, 1.2], "max_brightness": 0.1},
      "iters": 2000,
      "batch": 8,
      "lr": 0.03,
      "probe_every": 100,
      "snapshot_every": 100,
      "out": "out"
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .losses import LossWeights
from .patchops import INIT_MODES, EOTConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    detector: str = "toy"
    data: str | None = None
    target: str | None = "builtin:sunset"
    patch_size: int = 32
    ratio: float = 0.3
    init: str = "from-target"
    weights: LossWeights = field(default_factory=LossWeights)
    eot: EOTConfig = field(default_factory=EOTConfig)
    iters: int = 2000
    batch: int = 8
    lr: float = 0.03
    probe_every: int = 100
    snapshot_every: int = 100
    out: str = "out"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_INTS = ("seed", "patch_size", "iters", "batch", "probe_every", "snapshot_every")
_FLOATS = ("ratio", "lr")


def _sub(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in raw.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kw = dict(raw)
    if "weights" in kw:
        kw["weights"] = _sub(LossWeights, kw["weights"], "weights")
    if "eot" in kw:
        kw["eot"] = _sub(EOTConfig, kw["eot"], "eot")
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    for k in _INTS:
        v = getattr(cfg, k)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{k} must be an integer, got {v!r}")
    for k in _FLOATS:
        v = getattr(cfg, k)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{k} must be a number, got {v!r}")
    if cfg.patch_size < 16:
        raise ConfigError("patch_size must be at least 16")
    if not 0 < cfg.ratio <= 1:
        raise ConfigError("ratio must be in (0, 1]")
    if cfg.iters < 1 or cfg.batch < 1:
        raise ConfigError("iters and batch must be positive")
    if cfg.lr <= 0:
        raise ConfigError("lr must be positive")
    if cfg.probe_every < 0 or cfg.snapshot_every < 0:
        raise ConfigError("probe_every and snapshot_every must be >= 0")
    if cfg.init not in INIT_MODES:
        raise ConfigError(f"init must be one of {', '.join(INIT_MODES)}")
    if cfg.weights.beta > 0 and not cfg.target:
        raise ConfigError("beta > 0 needs a target artwork (set 'target')")
    if not isinstance(cfg.detector, str) or not cfg.detector:
        raise ConfigError("detector must be a path or 'toy'")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Dotted keys (``weights.beta``) override file values; re-validates."""
    raw = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return config_from_dict(raw)
