"""Plain-text configuration files.

Configs are INI-style sections of ``key = value`` pairs; section names are
organizational only and keys are globally unique, so the file flattens to one
mapping. Every command-line flag overrides its config key. Example::

    [train]
    epochs = 200
    lr = 2e-4
    schedule_shape = linear

    [inference]
    fuse_weight = 0.95
    kernel_size = 7
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .training import TrainConfig

__all__ = ["read_config", "train_config_from_mapping", "INFERENCE_KEYS"]

INFERENCE_KEYS = ("fuse_weight", "kernel_size", "mask_threshold", "mask_source",
                  "fpr_limit")

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def read_config(path) -> dict:
    """Flatten a sectioned key-value file into a single string mapping."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in flat:
                raise ValueError(f"duplicate config key {key!r} in {path}")
            flat[key] = value
    return flat


def _coerce(name: str, raw: str, target_type):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            return tuple(int(part) for part in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ValueError(f"config key {name!r}: cannot read {raw!r}") from exc
    return raw


_FIELD_TYPES = {
    "epochs": int, "batch_size": int, "lr": float, "lr_drop_epoch": int,
    "lr_drop_factor": float, "weight_decay": float, "adam_beta1": float,
    "adam_beta2": float, "adam_eps": float, "steps": int,
    "schedule_shape": str, "image_size": int, "seed": int, "base_width": int,
    "channel_mults": tuple, "blocks_per_level": int, "time_dim": int,
    "pe_channels": int, "norm_groups": int, "perlin_octaves": int,
    "perlin_cells": int, "max_mask_area": float, "texture_dir": str,
    "num_threads": int, "checkpoint_every": int, "out_dir": str,
}


def train_config_from_mapping(mapping: dict, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from config-file keys plus CLI overrides.

    Unknown keys are rejected (typos should fail loudly); keys outside the
    training schema, e.g. inference fusion settings, are simply skipped.
    """
    values: dict = {}
    for key, raw in mapping.items():
        if key in INFERENCE_KEYS or key in ("data_root", "category", "preset"):
            continue
        if key not in _TRAIN_FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, _FIELD_TYPES.get(key))
    if mapping.get("preset") == "full":
        base = TrainConfig.full_scale_preset()
        merged = dataclasses.asdict(base)
        merged.update(values)
        values = merged
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return TrainConfig(**values)
