"""Experiment configuration: TOML in, validated and filled with defaults."""

from __future__ import annotations

import copy
import sys
from pathlib import Path

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


MODALITIES = ("image", "audio", "sdf")
ARCHITECTURES = ("base", "wider", "vanilla-moe", "neural-experts")

_block = {"type": "string", "pattern": r"^\d+x\d+$"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_frac = {"type": "number", "minimum": 0, "maximum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment"],
    "properties": {
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["modality"],
            "properties": {
                "name": {"type": "string"},
                "modality": {"enum": list(MODALITIES)},
                "input": {"type": "string"},
                "output_dir": {"type": "string"},
                "seed": _nonneg_int,
                "precision": {"enum": [32, 64]},
                "metrics": {"type": "array", "items": {"enum": ["psnr", "ssim", "mse", "iou", "trimap_iou",
                                                                 "chamfer"]}},
                "downscale": _pos_int,
                "crop_square": {"type": "boolean"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "architecture": {"enum": list(ARCHITECTURES)},
                "size": {"enum": ["default", "small", "sdf_small", "sdf_large"]},
                "activation": {"enum": ["sine", "softplus", "softplus_ff", "finer"]},
                "n_experts": _pos_int,
                "conditioning": {"enum": ["none", "max", "mean", "concatenate"]},
                "encoder": _block,
                "expert": _block,
                "manager_encoder": _block,
                "manager_head": _block,
                "hidden_widths": {"type": "array", "items": _pos_int, "minItems": 1},
                "w0": _pos_num,
                "first_w0": _pos_num,
                "ff_freqs": _pos_int,
                "ff_sigma": _pos_num,
                "finer_bias": _pos_num,
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "random", "grid", "kmeans", "fixed-subdivision", "fixed-random"]},
                "iters": _nonneg_int,
                "lr": _pos_num,
                "batch_size": _pos_int,
                "cells": _pos_int,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "total_iters": _nonneg_int,
                "t_all": _frac,
                "t_e": _frac,
                "lr": {"type": "number", "minimum": 0},
                "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "batch_size": _pos_int,
                "log_every": _nonneg_int,
                "snapshot_every": _nonneg_int,
                "aux_segmentation": {"type": "boolean"},
                "aux_labels": {"type": "string"},
            },
        },
        "sdf": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "counts": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "sigma_coarse": _pos_num,
                "sigma_fine": _pos_num,
                "eval_resolution": {"type": "integer", "minimum": 2},
                "mesh_resolution": {"type": "integer", "minimum": 2},
                "resolution_cap": {"type": "integer", "minimum": 2},
                "trimap_d": _pos_num,
                "chamfer_points": _pos_int,
                "cloud_points": _pos_int,
            },
        },
    },
}

# Defaults shared by all modalities; per-modality tables below override them.
DEFAULTS = {
    "experiment": {"name": "run", "input": "bundled", "output_dir": "runs/run", "seed": 0, "precision": 32,
                   "downscale": 4, "crop_square": True},
    "model": {"architecture": "neural-experts", "size": "default", "activation": "sine", "n_experts": 4,
              "conditioning": "concatenate", "w0": 30.0, "ff_freqs": 128, "ff_sigma": 10.0, "finer_bias": 1.0},
    "pretrain": {"kind": "random", "iters": 1000},
    "train": {"total_iters": 30000, "t_all": 0.8, "t_e": 0.2, "lr": 1e-5, "lr_decay": 0.99995, "log_every": 100,
              "snapshot_every": 0, "aux_segmentation": False},
    "sdf": {"counts": [10000, 10000, 10000], "sigma_coarse": 4e-2, "sigma_fine": 4e-6, "eval_resolution": 128,
            "mesh_resolution": 128, "resolution_cap": 512, "trimap_d": 0.05, "chamfer_points": 100000,
            "cloud_points": 100000},
}

MODALITY_DEFAULTS = {
    "image": {"experiment": {"metrics": ["psnr", "ssim", "mse"]}},
    "audio": {"experiment": {"metrics": ["mse"], "input": "synthetic"},
              # sample-rate coordinates need a much higher first-layer frequency
              "model": {"first_w0": 3000.0}},
    "sdf": {"experiment": {"metrics": ["iou", "trimap_iou", "chamfer"], "input": "sphere"},
            "model": {"size": "sdf_small", "n_experts": 8},
            "pretrain": {"cells": 64},
            "train": {"lr": 5e-3, "lr_decay": 0.9999}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> dict:
    """Schema-check ``raw`` and return it with every default filled in."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    modality = raw["experiment"]["modality"]
    cfg = _merge(_merge(DEFAULTS, MODALITY_DEFAULTS[modality]), raw)
    t = cfg["train"]
    if abs(t["t_all"] + t["t_e"] - 1.0) > 1e-9:
        raise ConfigError("train: t_all + t_e must equal 1")
    m = cfg["model"]
    if m["architecture"] in ("vanilla-moe", "neural-experts"):
        from .model import neural_experts_config

        blocks = {k: m[k] for k in ("encoder", "expert", "manager_encoder", "manager_head") if k in m}
        cond = "none" if m["architecture"] == "vanilla-moe" else m["conditioning"]
        try:
            neural_experts_config(1, 1, m["size"], n_experts=m["n_experts"], conditioning=cond,
                                  activation=m["activation"], **blocks)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
    if cfg["train"]["aux_segmentation"] and modality != "audio":
        raise ConfigError("train: aux_segmentation is only supported for audio")
    return cfg


def load(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return validate(raw)


def set_key(cfg: dict, dotted: str, value) -> dict:
    """Return a copy of ``cfg`` with ``section.key`` set to ``value``."""
    out = copy.deepcopy(cfg)
    parts = dotted.split(".")
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def parse_value(text: str):
    """Interpret a command-line override value as TOML, falling back to a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def dump_toml(cfg: dict) -> str:
    """Minimal TOML writer for the resolved config (tables of scalars and lists)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = []
    for section, table in cfg.items():
        lines.append(f"[{section}]")
        for k, v in table.items():
            if v is not None:
                lines.append(f"{k} = {fmt(v)}")
        lines.append("")
    return "\n".join(lines)


def resolved_path(cfg: dict, base: Path | None = None) -> Path:
    out = Path(cfg["experiment"]["output_dir"])
    return out if out.is_absolute() or base is None else base / out
