"""YAML run configuration with dotted-key command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable

import yaml

from .core import ConfigError, ScaleConfig
from .cytoplasm_net import AttentionDeeplabConfig
from .data_io import SyntheticSceneSpec
from .nucleus_net import UNetConfig
from .training import TrainSpec

CONFIG_ENV = "PLASMASEG_CONFIG"

DEFAULTS: dict[str, Any] = {
    "data": {
        "train": ["data/train"],
        "test": "data/test",
        "label_map": {1: "nucleus", 2: "cytoplasm"},
    },
    "synthetic": {
        "n_images": 40,
        "image_side": 96,
        "n_cells": [3, 5],
        "ratio_means": [1.5, 4.0],
        "ratio_stds": [0.25, 0.25],
        "ratio_weights": [0.5, 0.5],
        "overlap_probability": 0.2,
        "nucleus_radius": [5.0, 8.0],
        "seed": 0,
    },
    "nucleus": {
        "model": {"depth": 4, "base_channels": 16},
        "train": {"epochs": 100, "learning_rate": 1e-4, "batch_size": 4, "rng_seed": 0, "augment": False},
        "checkpoint": "runs/nucleus.pt",
    },
    "cytoplasm": {
        "model": {
            "encoder_channels": [16, 32, 64],
            "aspp_rates": [1, 6, 12, 18],
            "aspp_channels": 32,
            "attention_reduction": 4,
            "fusion_kernel": None,
            "fusion_spatial": 3,
            "low_level_channels": 16,
            "decoder_channels": 32,
        },
        "train": {"epochs": 100, "learning_rate": 1e-5, "batch_size": 8, "rng_seed": 0, "augment": False},
        "checkpoint_dir": "runs/cytoplasm",
    },
    "scales": {
        "scales": [1.0, 1.6, 2.2, 3.0],
        "capacity_thresholds": None,
        "network_input_side": 256,
        "fill_fraction": 0.85,
        "margin_factor": 1.0,
    },
    "instances": {"threshold": 0.5, "min_area": 30},
    "analysis": {"bin_width": 0.1, "smoothing_window": 3, "min_prominence": 0.1, "headroom": 1.2},
    "evaluation": {"variant": "best_match"},
    "infer": {"workers": 1},
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and key != "label_map":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a mapping")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value
    return base


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return key.strip().split("."), value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict[str, Any]:
    """Defaults, then the YAML file (or ``$PLASMASEG_CONFIG``), then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
            raise ConfigError(f"config parse error at {where}: {getattr(exc, 'problem', exc)}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, user)
    for item in overrides:
        keys, value = parse_override(item)
        nested: Any = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested)
    return cfg


def config_hash(cfg: dict[str, Any]) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _build(cls, values: dict[str, Any], section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def unet_config(cfg) -> UNetConfig:
    return _build(UNetConfig, cfg["nucleus"]["model"], "nucleus.model")


def deeplab_config(cfg) -> AttentionDeeplabConfig:
    return _build(AttentionDeeplabConfig, cfg["cytoplasm"]["model"], "cytoplasm.model")


def train_spec(cfg, stage: str, checkpoint_path: str | None = None) -> TrainSpec:
    return _build(TrainSpec, dict(cfg[stage]["train"], checkpoint_path=checkpoint_path), f"{stage}.train")


def scale_config(cfg) -> ScaleConfig:
    values = dict(cfg["scales"])
    if values.get("capacity_thresholds") is not None:
        values["capacity_thresholds"] = tuple(values["capacity_thresholds"])
    values["scales"] = tuple(values["scales"])
    return _build(ScaleConfig, values, "scales")


def synthetic_spec(cfg, n_cells: int, seed: int) -> SyntheticSceneSpec:
    s = cfg["synthetic"]
    return _build(
        SyntheticSceneSpec,
        dict(
            image_side=s["image_side"],
            n_cells=n_cells,
            ratio_means=tuple(s["ratio_means"]),
            ratio_stds=tuple(s["ratio_stds"]),
            ratio_weights=tuple(s["ratio_weights"]),
            overlap_probability=s["overlap_probability"],
            nucleus_radius=tuple(s["nucleus_radius"]),
            rng_seed=seed,
        ),
        "synthetic",
    )


def cytoplasm_checkpoint(cfg, scale: float) -> Path:
    return Path(cfg["cytoplasm"]["checkpoint_dir"]) / f"cytoplasm_scale{float(scale):g}.pt"
