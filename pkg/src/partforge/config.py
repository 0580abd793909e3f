"""Flat key=value configuration.

Lines are ``key = value``; ``#`` starts a comment.  Every key has a typed
default below; unknown keys and unparseable values are reported by key path.
The PARTFORGE_DATA_DIR environment variable overrides ``data_dir`` only.
"""

from __future__ import annotations

import os
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "data_dir": "data",
    # geometry / sampling
    "grid_n": 64,
    "patch": 4,
    "feature_width": 8,
    "voxel_budget": 256,
    "kmax": 30,
    "steps": 50,
    "cfg_scale": 3.5,
    "nms_iou": 0.7,
    "validity_iou": 0.85,
    "validity_samples": 64,
    "lattice": 2048,
    # model
    "model.depth": 8,
    "model.width": 128,
    "model.heads": 4,
    "model.tokens_per_part": 8,
    "model.cond_tokens": 8,
    "model.cond_width": 64,
    "model.seed": 0,
    # training
    "train.codec_steps": 3000,
    "train.codec_lr": 3e-3,
    "train.steps_layout": 1500,
    "train.steps_coarse": 1500,
    "train.steps_refine": 800,
    "train.lr": 1e-3,
    "train.batch": 4,
    "train.drop_prob": 0.1,
    "train.seed": 0,
    "train.augment": True,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({exc})") from exc


def load_config(path: str | Path | None = None) -> dict:
    """Defaults merged with the file (if given); env var overrides data_dir."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        for lineno, line in enumerate(p.read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in stripped.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{p}:{lineno}: unknown config key {key!r}")
            cfg[key] = _coerce(key, raw)
    env_dir = os.environ.get("PARTFORGE_DATA_DIR")
    if env_dir:
        cfg["data_dir"] = env_dir
    return cfg


def config_text(cfg: dict) -> str:
    return "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg)) + "\n"
