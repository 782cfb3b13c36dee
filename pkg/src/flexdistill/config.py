"""Run configuration: JSON schema, defaults, and builders for data/model/trainer."""
from __future__ import annotations

import copy
import json
import os

import jsonschema

from .data import Dataset, fit_normalizer, load_csv, load_idx, make_synthetic, normalize, split
from .errors import ConfigError, FlexDistillError
from .losses import DistillConfig
from .models import EarlyExitNet, SlimmableNet
from .trainer import TrainConfig

_pos_int = {"type": "integer", "minimum": 1}
_path = {"type": "string"}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "arch": {"enum": ["early_exit", "slimmable"]},
                "kind": {"enum": ["dense", "conv"]},
                "exits": _pos_int,
                "width": _pos_int,
                "widths": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                           "minItems": 1},
                "channels": {"type": "array", "items": _pos_int, "minItems": 1},
                "batch_norm": {"type": "boolean"},
                "shared_bn_affine": {"type": "boolean"},
                "bn_momentum": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["spirals", "blobs", "idx", "csv"]},
                "n_per_class": _pos_int,
                "classes": {"type": "integer", "minimum": 2},
                "noise": {"type": "number", "minimum": 0},
                "turns": {"type": "number", "exclusiveMinimum": 0},
                "images": _path,
                "labels": _path,
                "val_images": _path,
                "val_labels": _path,
                "path": _path,
                "val_path": _path,
                "label_column": {"type": "string"},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "normalize": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _pos_int,
                "batch_size": {"type": "integer", "minimum": 2},
                "lr": {"type": "number", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "milestones": {"type": ["array", "null"], "items": _pos_int},
                "lr_factor": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "eval_every": _pos_int,
            },
        },
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": ["NONE", "IPKD", "TA1", "TAM"]},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "lambda": {"type": "number", "minimum": 0, "maximum": 1},
                "divergence": {"enum": ["KL", "CE"]},
                "kl_order": {"enum": ["paper", "classic"]},
                "detach_teacher": {"type": "boolean"},
            },
        },
        "out": {"type": "string"},
    },
}

DEFAULTS = {
    "model": {
        "arch": "early_exit",
        "kind": "dense",
        "exits": 4,
        "width": 64,
        "widths": [0.25, 0.5, 0.75, 1.0],
        "channels": [16, 32, 64],
        "batch_norm": True,
        "shared_bn_affine": False,
        "bn_momentum": 0.1,
    },
    "data": {
        "source": "spirals",
        "n_per_class": 1200,
        "classes": 3,
        "noise": 0.1,
        "turns": 1.25,
        "label_column": "label",
        "val_fraction": 1 / 6,
        "seed": 0,
        "normalize": True,
    },
    "train": {
        "epochs": 30,
        "batch_size": 64,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "milestones": None,
        "lr_factor": 0.1,
        "seed": 0,
        "eval_every": 1,
    },
    "distill": {
        "strategy": "TAM",
        "tau": 1.0,
        "lambda": 0.8,
        "divergence": "KL",
        "kl_order": "paper",
        "detach_teacher": True,
    },
    "out": "runs/default",
}

_PATH_KEYS = ("images", "labels", "val_images", "val_labels", "path", "val_path")


def _error_path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
    return ".".join(parts) or "<root>"


def resolve(raw: dict, base_dir: str | None = None) -> dict:
    """Validate ``raw`` against the schema and fill every default.

    Relative data paths are made absolute against ``base_dir``.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_error_path(e)}: {e.message}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if isinstance(values, dict):
            cfg[section].update(copy.deepcopy(values))
        else:
            cfg[section] = values
    if base_dir is not None:
        for key in _PATH_KEYS:
            p = cfg["data"].get(key)
            if p and not os.path.isabs(p):
                cfg["data"][key] = os.path.normpath(os.path.join(base_dir, p))
    # semantic checks that the schema cannot express
    try:
        train_config(cfg)
        distill_config(cfg)
    except FlexDistillError as e:
        raise ConfigError(str(e)) from None
    model = cfg["model"]
    if model["arch"] == "slimmable":
        ws = model["widths"]
        if any(b <= a for a, b in zip(ws, ws[1:])) or ws[-1] != 1.0:
            raise ConfigError(f"model.widths: must be strictly ascending and end at 1.0, got {ws}")
    src = cfg["data"]["source"]
    need = {"idx": ("images", "labels"), "csv": ("path",)}.get(src, ())
    for key in need:
        if not cfg["data"].get(key):
            raise ConfigError(f"data.{key}: required for source {src!r}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return resolve(raw, os.path.dirname(os.path.abspath(path)))


def train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    ms = t["milestones"]
    try:
        return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                           momentum=t["momentum"], weight_decay=t["weight_decay"],
                           milestones=list(ms) if ms is not None else None,
                           lr_factor=t["lr_factor"], seed=t["seed"], eval_every=t["eval_every"])
    except ConfigError:
        raise
    except FlexDistillError as e:
        raise ConfigError(f"train: {e}") from None


def distill_config(cfg) -> DistillConfig:
    d = cfg["distill"]
    try:
        return DistillConfig(tau=d["tau"], lam=d["lambda"], divergence=d["divergence"],
                             strategy=d["strategy"], kl_order=d["kl_order"],
                             detach_teacher=d["detach_teacher"])
    except FlexDistillError as e:
        raise ConfigError(f"distill: {e}") from None


def build_data(cfg) -> tuple[Dataset, Dataset]:
    d = cfg["data"]
    src = d["source"]
    val = None
    if src in ("spirals", "blobs"):
        full = make_synthetic(src, d["n_per_class"], d["classes"], d["noise"], d["seed"], turns=d["turns"])
    elif src == "idx":
        full = load_idx(d["images"], d["labels"])
        if d.get("val_images"):
            val = load_idx(d["val_images"], d["val_labels"], full.num_classes)
    else:
        full = load_csv(d["path"], d["label_column"])
        if d.get("val_path"):
            val = load_csv(d["val_path"], d["label_column"], full.num_classes)
    if val is None:
        train, val = split(full, d["val_fraction"], d["seed"])
    else:
        train = full
    if d["normalize"]:
        stats = fit_normalizer(train)
        train, val = normalize(train, stats), normalize(val, stats)
    return train, val


def build_model(cfg, input_shape, num_classes, seed=None):
    m = cfg["model"]
    seed = cfg["train"]["seed"] if seed is None else seed
    if m["arch"] == "early_exit":
        return EarlyExitNet(input_shape, num_classes, exits=m["exits"], width=m["width"], kind=m["kind"],
                            batch_norm=m["batch_norm"], bn_momentum=m["bn_momentum"], seed=seed)
    return SlimmableNet(input_shape, num_classes, widths=m["widths"], channels=m["channels"], kind=m["kind"],
                        shared_bn_affine=m["shared_bn_affine"], bn_momentum=m["bn_momentum"], seed=seed)
