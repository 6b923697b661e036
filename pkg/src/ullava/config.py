"""Run configuration: one YAML file plus ``key=value`` overrides, hashed for provenance."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import yaml

from .data.clients import ClientSettings
from .errors import ValidationError
from .losses import LossConfig
from .model import ModelConfig
from .trainer import STAGE_DEFAULTS, StageConfig

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "model": ModelConfig().to_dict(),
    "loss": {"alpha1": 2.0, "alpha2": 0.5, "beta1": 1.0, "beta2": 1.0, "dice_epsilon": 1e-6, "combine_branches": True},
    "build": {
        "salient_source": None,
        "synthetic": {},
        "referring": None,
        "mock_clients": False,
        "max_workers": 4,
        "clients": {"caption_url": None, "tag_url": None, "timeout": 30.0, "attempts": 3, "backoff": 0.5},
    },
    "lm_pretrain": {"enabled": True, "datasets": [], "max_steps": 600, "learning_rate": 3e-3, "batch_size": 32},
    "stage1": {
        "enabled": True,
        "datasets": [],
        "max_steps": 300,
        "learning_rate": STAGE_DEFAULTS["I"]["learning_rate"],
        "batch_size": STAGE_DEFAULTS["I"]["batch_size"],
        "token_limit": STAGE_DEFAULTS["I"]["token_limit"],
        "trainable_scopes": list(STAGE_DEFAULTS["I"]["trainable_scopes"]),
    },
    "stage2": {
        "enabled": False,
        "datasets": [],
        "init_checkpoint": None,
        "require_stage1": True,
        "max_steps": 500,
        "learning_rate": STAGE_DEFAULTS["II"]["learning_rate"],
        "batch_size": STAGE_DEFAULTS["II"]["batch_size"],
        "token_limit": STAGE_DEFAULTS["II"]["token_limit"],
        "trainable_scopes": list(STAGE_DEFAULTS["II"]["trainable_scopes"]),
    },
    "eval": {"splits": {}, "shards": 1, "threshold": 0.5, "max_new_tokens": 32},
}


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(config: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as YAML (numbers, lists, null...)."""
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = yaml.safe_load(raw)
    return config


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file {path} not found")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"config file {path} must hold a mapping")
        config = deep_merge(config, loaded)
    for o in overrides:
        apply_override(config, o)
    return config


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def model_config(config: dict) -> ModelConfig:
    try:
        return ModelConfig(**config["model"])
    except TypeError as e:
        raise ValidationError(f"bad model section: {e}") from e


def loss_config(config: dict) -> LossConfig:
    try:
        return LossConfig(**config["loss"])
    except (TypeError, ValueError) as e:
        raise ValidationError(f"bad loss section: {e}") from e


def stage_config(config: dict, section: str, stage: str) -> StageConfig:
    sec = config[section]
    keys = ("learning_rate", "batch_size", "token_limit", "trainable_scopes", "max_steps")
    kwargs = {k: sec[k] for k in keys if k in sec}
    kwargs["seed"] = sec.get("seed", config["seed"])
    try:
        return StageConfig.for_stage(stage, **kwargs)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"bad {section} section: {e}") from e


def client_settings(config: dict) -> ClientSettings:
    c = config["build"]["clients"]
    return ClientSettings(c.get("caption_url"), c.get("tag_url"), c["timeout"], c["attempts"], c["backoff"]).with_env()
