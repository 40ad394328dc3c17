"""Versioned JSON checkpoints that round-trip parameters bit-exactly.

Float64 values survive JSON because Python serializes them with
shortest-round-trip repr; reloading gives bit-identical arrays.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import InputError
from .util import atomic_write_text

FORMAT_NAME = "molstack-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, params: dict[str, np.ndarray]) -> None:
    doc = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": {name: arr.tolist() for name, arr in params.items()},
        "shapes": {name: list(arr.shape) for name, arr in params.items()},
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_NAME:
        raise InputError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    params = {}
    for name, values in doc["params"].items():
        arr = np.asarray(values, dtype=np.float64).reshape(doc["shapes"][name])
        params[name] = arr
    return doc["kind"], doc["config"], params
