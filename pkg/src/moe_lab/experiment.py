"""Run configuration files: parsing, dotted overrides and dataset resolution.

A run config is one JSON object holding the model fields (``backbone``,
``head``, ``num_classes``, ``loss_weights``, ``seed``) next to optional
``train``, ``data``, ``curvature`` and ``bench`` sections.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import numpy as np

from .bench import BenchConfig
from .data import cifar10_available, load_cifar10, normalize, split, synth_clusters
from .errors import ConfigError, UsageError
from .model import ModelConfig, config_hash
from .train import TrainConfig

DATA_DEFAULTS = {
    "source": "auto",          # auto | synthetic | cifar10
    "seed": 0,
    "classes": 4,
    "clusters_per_class": 2,
    "dim": 16,
    "n_per_class": 200,
    "spread": 0.8,
    "fractions": [0.7, 0.15, 0.15],
    "n_train": 2000,
    "n_val": 500,
    "n_test": 1000,
    "dir": None,
}
CURVATURE_DEFAULTS = {"tol": 1e-3, "max_iters": 200, "samples": 100,
                      "alpha_min": -1.0, "alpha_max": 1.0, "alpha_points": 41, "seed": 0}


def parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides (values parsed as JSON when possible)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(raw)
    return cfg


def load_run_config(path, overrides=()) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {str(path)!r} does not exist")
    try:
        cfg = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve(apply_overrides(cfg, overrides), overrides)


def resolve(cfg: dict, overrides=()) -> dict:
    """Validate every section and fill defaults, returning a canonical dict."""
    model = ModelConfig.from_dict(cfg)
    train = TrainConfig.from_dict(cfg.get("train", {}))
    data = dict(DATA_DEFAULTS)
    unknown = set(cfg.get("data", {})) - set(DATA_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    data.update(cfg.get("data", {}))
    curv = dict(CURVATURE_DEFAULTS, **cfg.get("curvature", {}))
    try:
        bench = BenchConfig(**cfg.get("bench", {}))
    except TypeError as exc:
        raise ConfigError(f"invalid bench config: {exc}") from None
    out = model.to_dict()
    out.update(train=train.to_dict(), data=data, curvature=curv,
               bench={"batch_sizes": list(bench.batch_sizes), "warmup": bench.warmup,
                      "iters": bench.iters, "seed": bench.seed, "device": bench.device,
                      "measure_memory": bench.measure_memory})
    if overrides:
        out["overrides"] = list(overrides)
    return out


def run_hash(cfg: dict) -> str:
    return config_hash({k: v for k, v in cfg.items() if k != "overrides"})


def load_splits(cfg: dict, data_dir=None):
    """Normalised (train, val, test) for a resolved run config."""
    d = cfg["data"]
    directory = data_dir or d.get("dir") or os.environ.get("MOE_LAB_DATA_DIR")
    source = d["source"]
    if source == "auto":
        source = "cifar10" if cifar10_available(directory) else "synthetic"
    if source == "cifar10":
        splits = load_cifar10(directory, d["n_train"], d["n_val"], d["n_test"], d["seed"])
    elif source == "synthetic":
        ds = synth_clusters(d["seed"], d["classes"], d["clusters_per_class"], d["dim"],
                            d["n_per_class"], d["spread"])
        splits = normalize(*split(ds, d["fractions"], d["seed"]))
    else:
        raise ConfigError(f"unknown data source {source!r}")
    model = ModelConfig.from_dict(cfg)
    tr = splits[0]
    if tr.dim != model.input_dim or tr.num_classes != model.num_classes:
        raise ConfigError(
            f"data ({source}: dim {tr.dim}, {tr.num_classes} classes) does not match model "
            f"(input_dim {model.input_dim}, num_classes {model.num_classes})")
    return splits


def alphas(cfg: dict) -> np.ndarray:
    c = cfg["curvature"]
    return np.linspace(c["alpha_min"], c["alpha_max"], int(c["alpha_points"]))
