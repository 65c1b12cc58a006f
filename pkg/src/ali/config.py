"""Layered run configuration: defaults < preset < file < flags."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

import yaml

from .errors import ConfigurationError

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "jobs": 1,
    "data": {
        "n_scenes": 200,
        "n_lights": 8,
        "n_test_scenes": 40,
        "n_zoo_scenes": 40,
        "scene": {"height": 64, "width": 64},
    },
    "model": {
        "encoder_channels": [16, 32, 64],
        "code_dim": 32,
        "base_decoder_width": 32,
        "diffusion_width": 48,
        "diffusion_cond_channels": 16,
        "diffusion_output": "v",
        "diffusion_code_map": 8,
        "latent_factor": 4,
        "T": 100,
        "schedule": "cosine",
    },
    "prior": {
        "kind": "recon",
        "channels": [8, 16, 32],
        "n_layers": 3,
        "pretrain": {"steps": 600, "batch_size": 16, "lr": 2e-3, "mask_ratio": 0.5, "mask_patch": 8,
                     "temperature": 0.2, "jitter": 0.2, "log_every": 100},
    },
    "stages": {
        "0": {"epochs": 30, "groups_per_batch": 4, "views_per_group": 4,
              "loss_weights": {"intrinsics": 1e-4, "reg_A": 1e-4, "reg_L": 1e-4}},
        "1": {"epochs": 4, "groups_per_batch": 4, "views_per_group": 4,
              "loss_weights": {"intrinsics": 1e-4, "reg_A": 1e-4, "reg_L": 1e-4}},
        "2": {"epochs": 60, "batch_size": 32},
        "3": {"epochs": 2, "batch_size": 32, "identity_mix": 0.10},
    },
    "zoo": {"k": 7, "n_sources": 1000, "group_size": 8, "steps": 50},
    "eval": {"steps": 50, "offset": None, "n_refs": 12, "n_trials": None, "seed": 0, "model": "diffusion"},
    "probe": {"kinds": ["random", "recon", "contrastive"], "seeds": [0, 1, 2]},
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "smoke": {
        "data": {"n_scenes": 6, "n_lights": 4, "n_test_scenes": 3, "n_zoo_scenes": 3,
                 "scene": {"height": 32, "width": 32}},
        "model": {"diffusion_width": 16, "T": 20},
        "prior": {"pretrain": {"steps": 5, "batch_size": 4}},
        "stages": {"0": {"epochs": 1, "groups_per_batch": 2, "views_per_group": 2},
                   "1": {"epochs": 1, "groups_per_batch": 2, "views_per_group": 2},
                   "2": {"epochs": 1, "batch_size": 8},
                   "3": {"epochs": 1, "batch_size": 8}},
        "zoo": {"k": 2, "n_sources": 4, "group_size": 4, "steps": 4},
        "eval": {"steps": 4, "n_refs": 3},
        "probe": {"kinds": ["random", "recon"], "seeds": [0]},
    },
}


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}".splitlines()[0]) from exc
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{path} must hold a mapping at the top level")
    return dict(data)


def parse_override(item: str) -> dict:
    """'a.b.c=value' -> {'a': {'b': {'c': value}}}; the value is YAML-typed."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigurationError(f"override {item!r} has an empty key")
    value = yaml.safe_load(raw)
    out: Dict[str, Any] = {parts[-1]: value}
    for p in reversed(parts[:-1]):
        out = {p: out}
    return out


def resolve(preset: str = "default", file: Optional[str] = None, overrides: Iterable[str] = (),
            flags: Optional[Mapping] = None) -> dict:
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = deep_merge(DEFAULTS, PRESETS[preset])
    if file:
        cfg = deep_merge(cfg, load_file(file))
    for item in overrides:
        cfg = deep_merge(cfg, parse_override(item))
    if flags:
        cfg = deep_merge(cfg, {k: v for k, v in flags.items() if v is not None})
    validate(cfg)
    return cfg


def validate(cfg: Mapping) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    d = cfg["data"]
    if d["n_lights"] < 2:
        raise ConfigurationError("need at least two lights per scene")
    for k in ("n_scenes", "n_test_scenes", "n_zoo_scenes"):
        if int(d[k]) < 1:
            raise ConfigurationError(f"data.{k} must be >= 1")
    unknown_stages = set(cfg["stages"]) - {"0", "1", "2", "3"}
    if unknown_stages:
        raise ConfigurationError(f"unknown stages {sorted(unknown_stages)}")


def dump(cfg: Mapping, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dict(cfg), sort_keys=True))
    return path
