"""Flat pipeline configuration with per-command validation and hashing.

A config is a plain dict. Every key has a documented default; unknown
keys are rejected so typos fail loudly instead of silently falling back.
"""

from __future__ import annotations

import hashlib
import json

DEFAULTS = {
    # global
    "seed": 7,
    # synthetic dataset
    "n_families": 4,
    "pitch_min": 40,
    "pitch_max": 52,
    "clips_per_family_train": 256,
    "clips_per_family_test": 64,
    # source embedding space
    "src_dim": 64,
    "src_clusters": 8,
    "src_train": 2048,
    "src_test": 512,
    "src_noise_std": 0.05,
    # audio metric
    "psi_dim": 128,
    "triplet_margin": 1.0,
    "triplet_epochs": 8,
    "metric_batch_size": 64,
    # networks / GAN training
    "channel_mult": 8,
    "batch_size": 64,
    "n_critic": 5,
    "lambda_metric": 10.0,
    "g_steps": 2000,
    "lr": 2e-4,
    "beta1": 0.5,
    "beta2": 0.999,
    "lr_decay_rate": 0.9,
    "lr_decay_epochs": 100,
    "phase_shuffle": 2,
    "log_every": 10,
    "checkpoint_every": 500,
    # evaluation
    "classifier_epochs": 6,
    "eval_translations": 512,
    "assign_mode": "centroid",
}

_INT_KEYS = {
    "seed", "n_families", "pitch_min", "pitch_max",
    "clips_per_family_train", "clips_per_family_test", "src_dim",
    "src_clusters", "src_train", "src_test", "psi_dim", "triplet_epochs",
    "metric_batch_size", "channel_mult", "batch_size", "n_critic",
    "g_steps", "lr_decay_epochs", "phase_shuffle", "log_every",
    "checkpoint_every", "classifier_epochs", "eval_translations",
}

REQUIRED_KEYS = {
    "gen-data": ("seed", "n_families", "pitch_min", "pitch_max",
                 "clips_per_family_train", "clips_per_family_test",
                 "src_dim", "src_clusters", "src_train", "src_test",
                 "src_noise_std"),
    "train-metric": ("seed", "psi_dim", "triplet_margin", "triplet_epochs",
                     "metric_batch_size", "channel_mult"),
    "train-classifiers": ("seed", "channel_mult", "classifier_epochs",
                          "batch_size"),
    "train-gan": ("seed", "channel_mult", "batch_size", "n_critic",
                  "lambda_metric", "g_steps", "lr", "beta1", "beta2",
                  "lr_decay_rate", "lr_decay_epochs", "phase_shuffle",
                  "log_every", "checkpoint_every"),
    "translate": ("seed", "pitch_min", "pitch_max"),
    "evaluate": ("seed", "eval_translations", "assign_mode"),
}


class ConfigError(ValueError):
    pass


def validate_config(cfg: dict) -> dict:
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**DEFAULTS, **cfg}
    for key in _INT_KEYS:
        val = merged[key]
        if not isinstance(val, int) or isinstance(val, bool):
            raise ConfigError(f"config key {key!r} must be an integer")
    if merged["pitch_min"] > merged["pitch_max"]:
        raise ConfigError("pitch_min must be <= pitch_max")
    if merged["n_critic"] < 1:
        raise ConfigError("n_critic must be >= 1")
    if merged["lambda_metric"] < 0:
        raise ConfigError("lambda_metric must be >= 0")
    if merged["assign_mode"] not in ("centroid", "nearest"):
        raise ConfigError("assign_mode must be 'centroid' or 'nearest'")
    return merged


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read a JSON config file, apply overrides, fill defaults, validate."""
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    if overrides:
        raw.update(overrides)
    return validate_config(raw)


def require_keys(cfg: dict, command: str):
    missing = [k for k in REQUIRED_KEYS[command] if k not in cfg]
    if missing:
        raise ConfigError(
            f"{command} requires config keys: {', '.join(missing)}")


def config_hash(cfg: dict) -> str:
    """Digest of the canonicalized full key set."""
    canon = json.dumps(validate_config(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
