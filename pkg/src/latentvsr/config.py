"""Run configuration: versioned YAML merged onto defaults and validated."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .denoiser import DenoiserConfig
from .errors import ConfigError
from .ilt import FUSION_MODES, NOISE_MODES
from .trainer import STRATEGIES
from .vae import VaeConfig

CONFIG_VERSION = 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "data": {"n_clips": 32, "val_clips": 16, "frames": 48, "motion": "mixed"},
    "schedule": {"kind": "cosine", "timesteps": 1000},
    "model": DenoiserConfig().to_dict(),
    "vae": {**VaeConfig().to_dict(), "train_steps": 1000, "train_lr": 1e-3, "train_batch": 2},
    "train": {
        "strategy": "pls3",
        "total_steps": 3000,
        "lr": 1e-4,
        "batch": 4,
        "prior_steps": 1000,
        "prior_lr": 1e-3,
        "eval_every": 0,
        "eval_steps": 20,
        "checkpoint_every": 250,
        "patch": 64,
        "stride_range": [1, 6],
    },
    "inference": {"window_len": 8, "overlap": 4, "steps": 20, "fusion": "per_step", "noise": "shared"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def validate(cfg: dict) -> dict:
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version {cfg.get('version')!r} is not supported (expected {CONFIG_VERSION})")
    DenoiserConfig.from_dict(cfg["model"])
    VaeConfig.from_dict(vae_fields(cfg))
    t = cfg["train"]
    if t["strategy"] not in STRATEGIES:
        raise ConfigError(f"unknown strategy {t['strategy']!r}; expected one of {STRATEGIES}")
    for k in ("total_steps", "batch", "eval_steps", "patch"):
        if int(t[k]) < 1:
            raise ConfigError(f"train.{k} must be >= 1")
    if not float(t["lr"]) > 0:
        raise ConfigError("train.lr must be > 0")
    if int(t["prior_steps"]) < 0 or int(cfg["vae"]["train_steps"]) < 0:
        raise ConfigError("step counts must be >= 0")
    inf = cfg["inference"]
    if inf["fusion"] not in FUSION_MODES:
        raise ConfigError(f"inference.fusion must be one of {FUSION_MODES}")
    if inf["noise"] not in NOISE_MODES:
        raise ConfigError(f"inference.noise must be one of {NOISE_MODES}")
    if not 1 <= int(inf["overlap"]) < int(inf["window_len"]):
        raise ConfigError("inference.overlap must lie in [1, window_len)")
    if cfg["schedule"]["kind"] not in ("cosine", "linear") or int(cfg["schedule"]["timesteps"]) < 2:
        raise ConfigError("schedule must be cosine|linear with timesteps >= 2")
    if cfg["model"]["timesteps"] != cfg["schedule"]["timesteps"]:
        raise ConfigError("model.timesteps must equal schedule.timesteps")
    return cfg


def vae_fields(cfg: dict) -> dict:
    keys = VaeConfig().to_dict().keys()
    return {k: v for k, v in cfg["vae"].items() if k in keys}


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config {p} must be a mapping")
        if "version" not in raw:
            raise ConfigError(f"config {p} has no 'version' field")
    cfg = _merge(DEFAULTS, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def default_config_path(strategy: str) -> Path:
    if strategy not in STRATEGIES:
        raise ConfigError(f"no default config for strategy {strategy!r}")
    return Path(str(resources.files("latentvsr") / "configs" / f"{strategy}.yaml"))


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
