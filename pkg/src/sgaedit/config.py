"""Run configuration: one JSON document drives every CLI command.

Unknown keys are rejected (typos should fail loudly) and the fully
resolved document, defaults included, is written next to every command's
outputs so a run can be reproduced from it alone.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

DEFAULTS = {
    "seed": 0,
    "out": "runs/out",
    "model": {
        "d": 64,
        "layers_enc": 2,
        "layers_dec": 1,
        "heads": 4,
        "vocab": 16,
        "vocab_map": 4,
        "grid_high": [8, 8],
        "grid_low": [4, 4],
        "blocks": 8,
        "top_k": 3,
        "radius": 1,
        "ffw": 256,
    },
    "task": {"kind": "mirror"},
    "train": {
        "steps": 200,
        "lr": 0.2,
        "optimizer": "sgd",
        "clip": 1.0,
        "stages": [],  # SGA fine-tune grid ladder; [] = double per side up to grid_high
        "stage_steps": 100,
    },
    "sampling": {"top_k": 100, "n_samples": 50, "n_keep": 10},
    "quantizer": {"patch": 16, "iterations": 50, "channels": 1, "corpus_images": 6},
    "ablation": {
        "variants": ["dense", "guided", "local"],
        "steps": 200,
        "seeds": [0, 1, 2],
        "lr": 0.2,
        "optimizer": "sgd",
        "eval_instances": 16,
        "window": 3,
    },
    "bench": {
        "lengths": [256, 1024],
        "d": 64,
        "variants": ["dense", "guided"],
        "repeats": 5,
        "blocks": 64,
        "radius": 1,
        "top_k": 3,
    },
    "leakcheck": {"trials": 100, "image_size": 128},
}


def _merge(defaults: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be an object")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(user: dict) -> dict:
    """Fill defaults, reject unknown keys, and sanity-check the result."""
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULTS, user, "")
    model_config(cfg)  # validates model block
    if cfg["sampling"]["top_k"] < 1:
        raise ConfigError("sampling.top_k must be >= 1")
    if cfg["sampling"]["n_keep"] > cfg["sampling"]["n_samples"]:
        raise ConfigError("sampling.n_keep cannot exceed n_samples")
    if cfg["task"]["kind"] not in ("mirror", "constant-region", "copy-corner"):
        raise ConfigError(f"unknown task kind {cfg['task']['kind']!r}")
    return cfg


def load(path, seed_override=None, out_override=None) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = resolve(user)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    if out_override is not None:
        cfg["out"] = str(out_override)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    try:
        return ModelConfig(
            d=m["d"],
            layers_enc=m["layers_enc"],
            layers_dec=m["layers_dec"],
            heads=m["heads"],
            vocab=m["vocab"],
            vocab_map=m["vocab_map"],
            grid_high=tuple(m["grid_high"]),
            grid_low=tuple(m["grid_low"]),
            blocks=m["blocks"],
            top_k=m["top_k"],
            radius=m["radius"],
            ffw=m["ffw"],
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def write_resolved(cfg: dict, directory) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def stage_ladder(cfg: dict) -> list:
    """Fine-tuning grids: configured stages, or doubling from low to high."""
    stages = [tuple(s) for s in cfg["train"]["stages"]]
    model = model_config(cfg)
    if stages:
        if stages[-1] != model.grid_high:
            raise ConfigError("last fine-tune stage must equal model.grid_high")
        return stages
    h, w = model.grid_low
    ladder = []
    while (h, w) != model.grid_high:
        h, w = h * 2, w * 2
        if h > model.grid_high[0] or w > model.grid_high[1]:
            raise ConfigError("grid_high is not reachable by doubling grid_low; set train.stages")
        ladder.append((h, w))
    return ladder or [model.grid_high]
