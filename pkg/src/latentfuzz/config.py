"""Pipeline configuration: one JSON document shared by every CLI subcommand.

Every object in the schema is closed, so a misspelt key is rejected before
any work starts. Missing keys take the values in ``DEFAULTS``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .coverage import CRITERIA


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "mode": "graybox",
    "dataset": {"kind": "blobs", "classes": 3, "shape": [1, 16, 16], "per_class": 200,
                "spread": 0.1, "jitter": 1.5, "images": None, "labels": None, "class_count": None},
    "split": {"train_fraction": 0.8},
    "train": {"hidden": [128, 64], "batchnorm": False, "lr": 0.1, "epochs": 20, "batch": 32},
    "manifold": {"latent_dim": 8},
    "corpus": {"per_class": 5},
    "coverage": {"nc_threshold": 0.75, "kmnc_sections": 1000, "tknc_k": 10},
    "fuzz": {"objective": "nc", "budget_steps": 1000, "budget_seconds": None, "try_num": 50,
             "batch_size": 32, "step_scale": 0.5, "ridge": 1e-6, "priority_decay": 0.9,
             "p_min": 0.1, "strategy": "trajectory", "rng_seed": None, "delta": 0.0005,
             "Lambda": 0.8, "explore_class": None},
    "oracle": {"kind": "label", "models": [], "agreement": "label", "tau": 0.0},
    "quantize": {"layer_kinds": ["Dense", "Conv2D"]},
    "retrain": {"limit": 2000, "epochs": 5, "lr": 0.05, "batch": 32},
    "paths": {"model": "model/model.json", "manifold": "manifold/manifold.json",
              "profile": "profile.json", "quantized": "quantized/model.json",
              "report": "report", "retrained": "retrained/model.json"},
}

_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_PATH = {"type": "string", "minLength": 1}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "mode": {"enum": ["graybox", "blackbox-quant"]},
    "dataset": _obj({
        "kind": {"enum": ["blobs", "idx"]},
        "classes": {"type": "integer", "minimum": 2},
        "shape": {"type": "array", "items": _POS_INT, "minItems": 1, "maxItems": 3},
        "per_class": _POS_INT,
        "spread": {"type": "number", "minimum": 0},
        "jitter": {"type": "number", "minimum": 0},
        "images": {"type": ["string", "null"]},
        "labels": {"type": ["string", "null"]},
        "class_count": {"type": ["integer", "null"], "minimum": 1},
    }),
    "split": _obj({"train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}),
    "train": _obj({
        "hidden": {"type": "array", "items": _POS_INT},
        "batchnorm": {"type": "boolean"},
        "lr": {"type": "number", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "batch": _POS_INT,
    }),
    "manifold": _obj({"latent_dim": _POS_INT}),
    "corpus": _obj({"per_class": _POS_INT}),
    "coverage": _obj({
        "nc_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "kmnc_sections": _POS_INT,
        "tknc_k": _POS_INT,
    }),
    "fuzz": _obj({
        "objective": {"enum": list(CRITERIA)},
        "budget_steps": {"type": ["integer", "null"], "minimum": 0},
        "budget_seconds": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "try_num": _POS_INT,
        "batch_size": _POS_INT,
        "step_scale": _POS_NUM,
        "ridge": {"type": "number", "minimum": 0},
        "priority_decay": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "p_min": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "strategy": {"enum": ["trajectory", "random"]},
        "rng_seed": {"type": ["integer", "null"], "minimum": 0},
        "delta": {"type": "number", "minimum": 0},
        "Lambda": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "explore_class": {"type": ["integer", "null"], "minimum": 0},
    }),
    "oracle": _obj({
        "kind": {"enum": ["label", "differential", "quant"]},
        "models": {"type": "array", "items": _PATH},
        "agreement": {"enum": ["label", "numeric"]},
        "tau": {"type": "number", "minimum": 0},
    }),
    "quantize": _obj({"layer_kinds": {"type": "array", "items": {"enum": ["Dense", "Conv2D"]},
                                      "minItems": 1}}),
    "retrain": _obj({
        "limit": {"type": "integer", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "minimum": 0},
        "batch": _POS_INT,
    }),
    "paths": _obj({k: _PATH for k in DEFAULTS["paths"]}),
})


def _where(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def _describe(error: jsonschema.ValidationError) -> str:
    if error.validator == "additionalProperties":
        unknown = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        prefix = _where(error.absolute_path)
        names = ", ".join(repr(k if prefix == "<root>" else f"{prefix}.{k}") for k in unknown)
        return f"unknown key {names}"
    return f"{_where(error.absolute_path)}: {error.message}"


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(raw) -> dict:
    """Validate a parsed document and return it merged onto the defaults."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw),
                    key=lambda e: (list(map(str, e.absolute_path)), e.validator))
    if errors:
        raise ConfigError(_describe(errors[0]))
    cfg = _merge(DEFAULTS, raw)
    ds = cfg["dataset"]
    if ds["kind"] == "idx" and not (ds["images"] and ds["labels"]):
        raise ConfigError("dataset.images and dataset.labels are required for kind 'idx'")
    oracle = cfg["oracle"]
    if oracle["kind"] == "differential" and not oracle["models"]:
        raise ConfigError("oracle.models must list at least one extra model for kind 'differential'")
    if cfg["mode"] == "blackbox-quant" and oracle["kind"] != "quant":
        raise ConfigError("mode 'blackbox-quant' needs oracle.kind 'quant'")
    fuzz = cfg["fuzz"]
    if fuzz["budget_steps"] is None and fuzz["budget_seconds"] is None:
        raise ConfigError("fuzz.budget_steps and fuzz.budget_seconds cannot both be null")
    return cfg


def load_config(path=None, seed: int | None = None) -> tuple[dict, Path]:
    """Read and validate ``path`` (defaults only when None); returns the config
    and the directory that relative dataset paths resolve against."""
    if path is None:
        raw, base = {}, Path.cwd()
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        base = path.resolve().parent
    if seed is not None and isinstance(raw, dict):
        raw = dict(raw, seed=seed)
    return validate(raw), base
