"""Strict JSON experiment configs: validation with JSON-path errors, defaults, canonical form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from . import nn
from .errors import ConfigError, ParseError
from .paradigm import ExperimentConfig
from .transforms import parse_transform_spec

SCHEMA_VERSION = 1

_INT = (int,)
_NUM = (int, float)

# key -> (accepted types, required)
_TOP = {
    "dataset": ((dict,), True),
    "transform": ((str,), True),
    "num_seen": (_INT, True),
    "seed": (_INT, False),
    "lineage": ((list,), False),
    "partition_seed": (_INT + (type(None),), False),
    "model": ((list,), False),
    "transform_probability": (_NUM, False),
    "epochs": (_INT, False),
    "lr": (_NUM, False),
    "weight_decay": (_NUM, False),
    "momentum": (_NUM, False),
    "batch_size": (_INT, False),
    "test_fraction": (_NUM, False),
    "holdout_fraction": (_NUM, False),
    "grid_search": ((bool,), False),
    "ablation_layers": ((str, list), False),
    "tau_step": (_NUM, False),
}
_SYNTH = {
    "category_count": (_INT, True),
    "samples_per_category": (_INT, True),
    "image_size": (_INT, True),
    "seed": (_INT, False),
}
_LAYER = {
    "kind": ((str,), True),
    "out_channels": (_INT, False),
    "kernel": (_INT, False),
    "stride": (_INT, False),
    "padding": (_INT, False),
    "units": (_INT, False),
}
_FLOAT_FIELDS = {"transform_probability", "lr", "weight_decay", "momentum", "test_fraction", "holdout_fraction",
                 "tau_step"}


def _type_name(types):
    names = {bool: "boolean", int: "integer", float: "number", str: "string", list: "array", dict: "object",
             type(None): "null"}
    return " or ".join(dict.fromkeys(names[t] for t in types))


def _check_type(value, types, path):
    # JSON booleans are Python ints; never let true/false pass as a number
    if isinstance(value, bool) and bool not in types:
        raise ParseError(f"{path}: expected {_type_name(types)}, got boolean")
    if not isinstance(value, types):
        raise ParseError(f"{path}: expected {_type_name(types)}, got {type(value).__name__}")


def _check_object(obj, table, path):
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: expected object, got {type(obj).__name__}")
    for key in obj:
        if key not in table:
            raise ParseError(f"{path}.{key}: unknown key")
    for key, (types, required) in table.items():
        if key not in obj:
            if required:
                raise ParseError(f"{path}.{key}: missing required key")
            continue
        _check_type(obj[key], types, f"{path}.{key}")


def _check_dataset(ds, path):
    if not isinstance(ds, dict):
        raise ParseError(f"{path}: expected object")
    if len(ds) != 1 or next(iter(ds)) not in ("synthetic", "archive"):
        extra = [k for k in ds if k not in ("synthetic", "archive")]
        if extra:
            raise ParseError(f"{path}.{extra[0]}: unknown key")
        raise ParseError(f"{path}: needs exactly one of 'synthetic' or 'archive'")
    if "archive" in ds:
        _check_type(ds["archive"], (str,), f"{path}.archive")
        return {"archive": ds["archive"]}
    synth = ds["synthetic"]
    _check_object(synth, _SYNTH, f"{path}.synthetic")
    return {"synthetic": {"category_count": synth["category_count"],
                          "samples_per_category": synth["samples_per_category"],
                          "image_size": synth["image_size"], "seed": synth.get("seed", 0)}}


def config_from_dict(doc: dict, path: str = "$") -> ExperimentConfig:
    """Validate a decoded config object and fill every default explicitly."""
    _check_object(doc, _TOP, path)
    kw = dict(doc)
    kw["dataset"] = _check_dataset(doc["dataset"], f"{path}.dataset")
    try:
        parse_transform_spec(doc["transform"])
    except ConfigError as exc:
        raise ParseError(f"{path}.transform: {exc}") from exc
    for i, n in enumerate(doc.get("lineage", [])):
        _check_type(n, _INT, f"{path}.lineage[{i}]")
    if "model" in doc:
        for i, layer in enumerate(doc["model"]):
            _check_object(layer, _LAYER, f"{path}.model[{i}]")
            try:
                nn.LayerSpec.from_dict(layer)
            except ConfigError as exc:
                raise ParseError(f"{path}.model[{i}]: {exc}") from exc
    if isinstance(doc.get("ablation_layers"), list):
        for i, sel in enumerate(doc["ablation_layers"]):
            _check_type(sel, (str, int), f"{path}.ablation_layers[{i}]")
    for key in _FLOAT_FIELDS & set(kw):
        kw[key] = float(kw[key])
    cfg = ExperimentConfig(**kw)
    _check_ranges(cfg, path)
    return cfg


def _check_ranges(cfg: ExperimentConfig, path: str):
    checks = [
        ("num_seen", cfg.num_seen >= 0),
        ("transform_probability", 0.0 <= cfg.transform_probability <= 1.0),
        ("epochs", cfg.epochs >= 0),
        ("lr", cfg.lr > 0),
        ("weight_decay", cfg.weight_decay >= 0),
        ("momentum", 0.0 <= cfg.momentum < 1.0),
        ("batch_size", cfg.batch_size >= 1),
        ("test_fraction", 0.0 < cfg.test_fraction < 1.0),
        ("holdout_fraction", 0.0 < cfg.holdout_fraction < 1.0),
        ("tau_step", 0.0 < cfg.tau_step <= 1.0),
    ]
    for key, ok in checks:
        if not ok:
            raise ParseError(f"{path}.{key}: value {getattr(cfg, key)!r} out of range")
    if sorted(set(cfg.lineage)) != list(cfg.lineage) or any(n >= cfg.num_seen for n in cfg.lineage):
        raise ParseError(f"{path}.lineage: must be strictly increasing and below num_seen")


def parse_config(text: str | bytes) -> ExperimentConfig:
    """Parse a JSON experiment config in strict mode.

    >>> cfg = parse_config('{"dataset": {"archive": "d.ilab"}, "transform": "identity", "num_seen": 1}')
    >>> cfg.momentum, cfg.batch_size, cfg.epochs
    (0.9, 32, 45)
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"$: config is not UTF-8 ({exc})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"$: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical JSON: sorted keys, fixed separators, every default spelled out."""
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def experiment_id(cfg: ExperimentConfig) -> str:
    """Content hash of the canonical config (the seed is part of it)."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]


@dataclass
class SweepConfig:
    """A base experiment crossed with a nested num_seen grid and a list of seeds."""
    base: ExperimentConfig
    num_seen_grid: list[int]
    seeds: list[int] = field(default_factory=lambda: [0])

    def experiments(self) -> list[ExperimentConfig]:
        out = []
        grid = sorted(self.num_seen_grid)
        for seed in self.seeds:
            for i, n in enumerate(grid):
                out.append(dataclasses.replace(self.base, num_seen=n, seed=seed, lineage=grid[:i]))
        return out


def parse_sweep_config(text: str | bytes) -> SweepConfig:
    """A sweep document is an experiment config whose ``num_seen`` is replaced by
    ``num_seen_grid``, plus an optional ``seeds`` list."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"$: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError("$: expected object")
    doc = dict(doc)
    for key in ("num_seen", "lineage"):
        if key in doc:
            raise ParseError(f"$.{key}: not allowed in a sweep; the sweep owns it")
    if "num_seen_grid" not in doc:
        raise ParseError("$.num_seen_grid: missing required key")
    grid = doc.pop("num_seen_grid")
    seeds = doc.pop("seeds", [doc.get("seed", 0)])
    _check_type(grid, (list,), "$.num_seen_grid")
    _check_type(seeds, (list,), "$.seeds")
    if not grid:
        raise ParseError("$.num_seen_grid: must not be empty")
    for i, n in enumerate(grid):
        _check_type(n, _INT, f"$.num_seen_grid[{i}]")
    for i, s in enumerate(seeds):
        _check_type(s, _INT, f"$.seeds[{i}]")
    if len(set(grid)) != len(grid):
        raise ParseError("$.num_seen_grid: duplicate values")
    base = config_from_dict({**doc, "num_seen": max(grid)})
    return SweepConfig(base, sorted(grid), list(seeds))
