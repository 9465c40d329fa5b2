"""Config defaults and JSON loading.

All hyperparameters without an authoritative source live here, as
TrainConfig defaults plus this single merge point: defaults < config file
< command-line flags. Unknown config keys are rejected outright.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Optional

import numpy as np

from .errors import FormatError
from .training import TrainConfig

_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_TUPLE_FIELDS = {"test_views"}
_ARRAY_FIELDS = {"background"}


def load_train_config(path: Optional[str] = None, **overrides) -> TrainConfig:
    """TrainConfig from an optional JSON file plus keyword overrides."""
    doc = {}
    if path is not None:
        with open(path) as f:
            doc = json.load(f)
        if not isinstance(doc, dict):
            raise FormatError("train config must be a JSON object")
        unknown = set(doc) - _FIELDS
        if unknown:
            raise FormatError(f"unknown train config keys: {sorted(unknown)}")
    merged = dict(doc)
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise FormatError(f"unknown train config override: {key}")
        merged[key] = val
    for key in _TUPLE_FIELDS & set(merged):
        merged[key] = tuple(merged[key])
    for key in _ARRAY_FIELDS & set(merged):
        merged[key] = np.asarray(merged[key], dtype=np.float64)
    return TrainConfig(**merged)


def dump_train_config(cfg: TrainConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out
