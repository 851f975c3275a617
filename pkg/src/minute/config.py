"""Run configuration: JSON documents validated against a strict schema.

Unknown keys are rejected; errors name the offending field with a dotted
path. The desk profile is sized to finish the whole pipeline in minutes on
a laptop CPU; the paper profile keeps the published training constants.
"""

from __future__ import annotations

import copy
import json
import re
from pathlib import Path

import jsonschema


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_INT = {"type": "integer"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "inference"],
    "properties": {
        "seed": _INT,
        "out_dir": {"type": "string"},
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "required": ["manifest"],
            "properties": {"manifest": {"type": "string"}},
        },
        "synthetic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_videos": _INT, "min_frames": _INT, "max_frames": _INT,
                "d_img": _INT, "d_sub": _INT, "d_word": _INT,
                "n_concepts": _INT, "noise_std": _NUM,
                "min_query_len": _INT, "max_query_len": _INT,
                "min_moment_len": _INT, "max_moment_len": _INT,
                "queries_per_video_train": _INT, "queries_per_video_test": _INT,
                "span_signature_purity": _NUM, "hard_query_rate": _NUM,
                "hard_signature_scale": _NUM,
                "subtitle_rate": _NUM, "frame_duration_s": _NUM,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": _INT, "n_heads": _INT, "ff_mult": _INT,
                "max_len": _INT, "mmt_layers": _INT, "conv_width": _INT,
            },
        },
        "retriever_training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _INT, "batch_size": _INT,
                "lr": _NUM, "weight_decay": _NUM,
            },
        },
        "localizer_training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _INT, "batch_size": _INT, "lr": _NUM,
                "weight_decay": _NUM, "n_negatives": _INT, "candidate_pool": _INT,
            },
        },
        "inference": {
            "type": "object",
            "additionalProperties": False,
            "required": ["top_k"],
            "properties": {
                "top_k": _INT, "max_moment_len": _INT, "min_moment_len": _INT,
                "nms_iou": _NUM, "n_results": _INT, "baseline_alpha": _NUM,
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ks": {"type": "array", "items": _INT},
                "ious": {"type": "array", "items": _NUM},
                "bias_k_values": {"type": "array", "items": _INT},
                "bias_iou": _NUM,
                "strict_iou": {"type": "boolean"},
            },
        },
    },
}

PROFILES = ("desk", "paper")


def default_config(profile: str = "desk") -> dict:
    """Full config document for a profile; synthetic data by default."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}, expected one of {PROFILES}")
    cfg = {
        "seed": 7,
        "out_dir": "runs/default",
        "synthetic": {
            "n_videos": 120,
            "min_frames": 10,
            "max_frames": 14,
            "d_img": 32, "d_sub": 32, "d_word": 32,
            "n_concepts": 20,
            "noise_std": 0.1,
            "min_query_len": 3, "max_query_len": 5,
            "min_moment_len": 2, "max_moment_len": 5,
            "queries_per_video_train": 4,
            "queries_per_video_test": 2,
            "span_signature_purity": 0.6,
            "hard_query_rate": 0.13,
            "hard_signature_scale": 0.45,
            "subtitle_rate": 1.0,
            "frame_duration_s": 1.5,
        },
        "model": {
            "d_model": 32, "n_heads": 4, "ff_mult": 4,
            "max_len": 128, "mmt_layers": 3, "conv_width": 3,
        },
        "retriever_training": {
            "epochs": 35, "batch_size": 32, "lr": 2e-3, "weight_decay": 0.01,
        },
        "localizer_training": {
            "epochs": 10, "batch_size": 32, "lr": 2e-3, "weight_decay": 0.01,
            "n_negatives": 3, "candidate_pool": 20,
        },
        "inference": {
            "top_k": 10, "max_moment_len": 24, "min_moment_len": 1,
            "nms_iou": 0.7, "n_results": 100, "baseline_alpha": 20.0,
        },
        "evaluation": {
            "ks": [1, 5, 10, 100],
            "ious": [0.5, 0.7],
            "bias_k_values": [1, 2, 5, 10],
            "bias_iou": 0.5,
            "strict_iou": False,
        },
    }
    if profile == "paper":
        cfg["retriever_training"] = {"epochs": 100, "batch_size": 256,
                                     "lr": 1e-4, "weight_decay": 0.01}
        cfg["localizer_training"] = {"epochs": 10, "batch_size": 32,
                                     "lr": 1e-4, "weight_decay": 0.01,
                                     "n_negatives": 4, "candidate_pool": 100}
    return cfg


def _dotted_path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        m = re.search(r"'(.*?)' is a required property", error.message)
        if m:
            parts.append(m.group(1))
    return ".".join(parts) if parts else "(root)"


def validate_config(doc: dict) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        if ("corpus" in doc) == ("synthetic" in doc):
            raise ConfigError("config needs exactly one of 'corpus' or 'synthetic'")
        return
    e = errors[0]
    path = _dotted_path(e)
    if e.validator == "required":
        raise ConfigError(f"missing required field {path}")
    if e.validator == "additionalProperties":
        m = re.search(r"'(.*?)' (?:was|were) unexpected", e.message)
        unknown = m.group(1) if m else e.message
        where = ".".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"unknown field {where + '.' if where else ''}{unknown}")
    raise ConfigError(f"invalid field {path}: {e.message}")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Path | None = None, profile: str = "desk",
                overrides: dict | None = None) -> dict:
    """Load + validate a config file, fill defaults, apply CLI overrides."""
    if path is not None:
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: not valid JSON ({e})") from e
        validate_config(doc)
        base = default_config(profile)
        if "corpus" in doc:
            base.pop("synthetic", None)
        cfg = _deep_merge(base, doc)
    else:
        cfg = default_config(profile)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def parse_override(expr: str) -> dict:
    """Parse a --set section.key=value CLI override into a nested dict."""
    if "=" not in expr:
        raise ConfigError(f"--set expects section.key=value, got {expr!r}")
    dotted, raw = expr.split("=", 1)
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override path {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        node = {key: node}
    return node
