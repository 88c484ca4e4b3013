"""Run configuration: one JSON schema for every subcommand, dotted-path CLI
overrides, and reproducibility manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import subprocess
import time
from importlib import metadata as _im
from pathlib import Path

import jsonschema

from .datagen import ToolSpec, default_tool_specs, desk_tool_specs
from .errors import ConfigError
from .fieldnet import ModelConfig
from .training import LossWeights, TrainConfig

_TOOL_SPEC_SCHEMA = {
    "type": "object",
    "required": ["name", "handle_length", "handle_radius", "blade_length",
                 "blade_width", "blade_thickness", "youngs_modulus", "clamp_length"],
    "properties": {
        "name": {"type": "string"},
        "handle_length": {"type": "number", "exclusiveMinimum": 0},
        "handle_radius": {"type": "number", "exclusiveMinimum": 0},
        "blade_length": {"type": "number", "exclusiveMinimum": 0},
        "blade_width": {"type": "number", "exclusiveMinimum": 0},
        "blade_thickness": {"type": "number", "exclusiveMinimum": 0},
        "youngs_modulus": {"type": "number", "exclusiveMinimum": 0},
        "clamp_length": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset": {"type": "string"},
                "pretrained_checkpoint": {"type": "string"},
                "checkpoint": {"type": "string"},
                "out_root": {"type": "string"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tools": {
                    "oneOf": [{"enum": ["desk", "default"]},
                              {"type": "array", "items": _TOOL_SPEC_SCHEMA, "minItems": 1}],
                },
                "n_conditions": {"type": "integer", "minimum": 1},
                "n_test_conditions": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer"},
                "sdf_n_total": {"type": "integer", "minimum": 1},
                "near_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "sigma_near": {"type": "number", "exclusiveMinimum": 0},
                "surface_density": {"type": "number", "exclusiveMinimum": 0},
                "contact_radius": {"type": "number", "exclusiveMinimum": 0},
                "load_range": {"type": "array", "items": {"type": "number"},
                               "minItems": 2, "maxItems": 2},
                "include_zero_anchor": {"type": "boolean"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "object_code_dim": {"type": "integer", "minimum": 1},
                "force_code_dim": {"type": "integer", "minimum": 1},
                "hidden_features": {"type": "integer", "minimum": 1},
                "hidden_layers": {"type": "integer", "minimum": 1},
                "w0": {"type": "number", "exclusiveMinimum": 0},
                "hyper_hidden": {"type": "integer", "minimum": 1},
                "point_feature_dims": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                       "minItems": 2, "maxItems": 2},
                "fusion_hidden": {"type": "integer", "minimum": 1},
                "force_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs_nominal": {"type": "integer", "minimum": 1},
                "epochs_deformed": {"type": "integer", "minimum": 1},
                "queries_per_step": {"type": "integer", "minimum": 1},
                "cloud_subsample": {"type": "integer", "minimum": 1},
                "lr_net": {"type": "number", "exclusiveMinimum": 0},
                "lr_codes": {"type": "number", "exclusiveMinimum": 0},
                "cosine_decay": {"type": "boolean"},
                "freeze_object": {"type": "boolean"},
                "seed": {"type": "integer"},
                "weights": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "lambda_normal": {"type": "number", "minimum": 0},
                        "lambda1": {"type": "number", "minimum": 0},
                        "lambda2": {"type": "number", "minimum": 0},
                        "lambda3": {"type": "number", "minimum": 0},
                        "lambda4": {"type": "number", "minimum": 0},
                        "lambda_c": {"type": "number", "minimum": 0},
                        "delta": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
        "infer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tool": {"type": "string"},
                "condition": {"type": "integer", "minimum": 0},
                "iters": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "restarts": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "camera": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                "drop_axial_fractions": {"type": "array", "items": {"type": "number"},
                                         "minItems": 2, "maxItems": 2},
                "use_known_force": {"type": "boolean"},
                "ray_augment": {"type": "boolean"},
                "recon_resolution": {"type": "integer", "minimum": 2},
            },
        },
        "recon": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tool": {"type": "string"},
                "condition": {"type": ["integer", "null"]},
                "resolution": {"type": "integer", "minimum": 2},
            },
        },
        "interp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tool": {"type": "string"},
                "steps": {"type": "integer", "minimum": 2},
                "t_min": {"type": "number"},
                "t_max": {"type": "number"},
                "resolution": {"type": "integer", "minimum": 2},
            },
        },
        "xsection": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tool": {"type": "string"},
                "condition": {"type": "integer", "minimum": 0},
                "axis": {"enum": ["x", "y", "z"]},
                "offset": {"type": "number"},
                "resolution": {"type": "integer", "minimum": 2},
            },
        },
        "correspond": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tool": {"type": "string"},
                "condition_a": {"type": "integer", "minimum": 0},
                "condition_b": {"type": "integer", "minimum": 0},
                "n_points": {"type": "integer", "minimum": 1},
                "n_stripes": {"type": "integer", "minimum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "recon_resolution": {"type": "integer", "minimum": 2},
                "recon_points": {"type": "integer", "minimum": 1},
                "gt_points_train": {"type": "integer", "minimum": 1},
                "gt_points_test": {"type": "integer", "minimum": 1},
                "scale_1e3": {"type": "boolean"},
            },
        },
    },
}

DEFAULT_CONFIG: dict = {
    "paths": {
        "dataset": "runs/dataset",
        "pretrained_checkpoint": "runs/pretrained.fsdf",
        "checkpoint": "runs/model.fsdf",
        "out_root": "runs",
    },
    "data": {
        "tools": "desk",
        "n_conditions": 6,
        "n_test_conditions": 0,
        "seed": 0,
        "sdf_n_total": 25_000,
        "near_fraction": 0.8,
        "sigma_near": 0.01,
        "surface_density": 300_000.0,
        "contact_radius": 0.01,
        "load_range": [0.5, 5.0],
        "include_zero_anchor": True,
    },
    "model": {
        "object_code_dim": 8,
        "force_code_dim": 32,
        "hidden_features": 256,
        "hidden_layers": 5,
        "w0": 30.0,
        "hyper_hidden": 256,
        "point_feature_dims": [64, 128],
        "fusion_hidden": 64,
        "force_scale": 0.1,
    },
    "train": {
        "epochs_nominal": 2000,
        "epochs_deformed": 800,
        "queries_per_step": 4096,
        "cloud_subsample": 1024,
        "lr_net": 1e-4,
        "lr_codes": 1e-3,
        "cosine_decay": True,
        "freeze_object": True,
        "seed": 0,
        "weights": {
            "lambda_normal": 0.1,
            "lambda1": 1.0,
            "lambda2": 1e-4,
            "lambda3": 1e-4,
            "lambda4": 1e-4,
            "lambda_c": 1e-2,
            "delta": 0.1,
        },
    },
    "infer": {
        "tool": "spatula",
        "condition": 1,
        "iters": 300,
        "lr": 1e-3,
        "restarts": 3,
        "seed": 0,
        "camera": [0.0, 0.0, 1.5],
        "drop_axial_fractions": [0.25, 0.9],
        "use_known_force": True,
        "ray_augment": False,
        "recon_resolution": 64,
    },
    "recon": {"tool": "spatula", "condition": None, "resolution": 128},
    "interp": {"tool": "spatula", "steps": 5, "t_min": 0.0, "t_max": 1.0, "resolution": 64},
    "xsection": {"tool": "spatula", "condition": 1, "axis": "y", "offset": 0.0, "resolution": 96},
    "correspond": {"tool": "spatula", "condition_a": 1, "condition_b": 2,
                   "n_points": 256, "n_stripes": 8},
    "eval": {"recon_resolution": 128, "recon_points": 5600,
             "gt_points_train": 5600, "gt_points_test": 800, "scale_1e3": True},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_override(cfg: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key=value")
    path, raw = dotted.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = cfg
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} crosses a non-object value")
    node[keys[-1]] = value


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from exc


def load_config(path: str | Path | None, overrides: tuple[str, ...] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = _deep_merge(cfg, user)
    for dotted in overrides:
        _apply_override(cfg, dotted)
    out_root = os.environ.get("FLEXSDF_OUT")
    if out_root:
        cfg.setdefault("paths", {})["out_root"] = out_root
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def package_version() -> str:
    try:
        base = _im.version("flexsdf")
    except _im.PackageNotFoundError:
        base = "0.0.0"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent)
        if desc.returncode == 0:
            return f"{base}+g{desc.stdout.strip()}"
    except OSError:
        pass
    return base


def write_run_manifest(out_dir: str | Path, subcommand: str, cfg: dict,
                       outputs: list[str]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("data", {}).get("seed", cfg.get("train", {}).get("seed")),
        "version": package_version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": sorted(str(o) for o in outputs),
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def tool_specs_from(data_cfg: dict) -> list[ToolSpec]:
    tools = data_cfg.get("tools", "desk")
    if tools == "desk":
        return desk_tool_specs()
    if tools == "default":
        return default_tool_specs()
    return [ToolSpec(**t) for t in tools]


def model_config_from(cfg: dict) -> ModelConfig:
    m = dict(cfg.get("model", {}))
    if "point_feature_dims" in m:
        m["point_feature_dims"] = tuple(m["point_feature_dims"])
    return ModelConfig(**m)


def train_config_from(cfg: dict, log_path: str | None = None) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    weights = LossWeights(**t.pop("weights", {}))
    return TrainConfig(model=model_config_from(cfg), weights=weights,
                       log_path=log_path, **t)
