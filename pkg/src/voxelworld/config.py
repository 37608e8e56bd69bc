"""Layered key=value configuration with dotted keys.

A config is a flat mapping validated against the known-key schema; files and
command-line overrides share the same syntax. The effective config hash is
embedded in every output artifact so runs are reproducible from
(config, seed) alone.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .models import ModelConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "data.n_traj": 4,
    "data.steps": 32,
    "data.seed": 0,
    "data.dims": (64, 24, 64),
    "data.frame_side": 16,
    "data.h": 32,
    "data.w": 32,
    "data.fov": 1.2,
    "data.world_seed": -1,

    "model.S": 16,
    "model.m": 4,
    "model.l": 8,
    "model.h": 32,
    "model.w": 32,
    "model.k_world": 4,
    "model.k_camera": 4,
    "model.k_pixel": 4,
    "model.hidden": 64,
    "model.cond_dim": 64,
    "model.c_w": 16,
    "model.seed": 0,

    "flow.steps": 20,
    "flow.eta": 3.0,
    "flow.tau_ctx_world": 0.02,
    "flow.tau_ctx_pixel": 0.1,

    "train.dataset": "",
    "train.batch_size": 8,
    "train.steps": 1000,
    "train.lr": 3e-3,
    "train.weight_decay": 0.01,
    "train.seed": 0,
    "train.p0_drop": 0.2,
    "train.cross_aug": 0.1,
    "train.ctx_noise_max": 0.1,
    "train.drop_w2d": False,

    "rollout.world_seed": 0,
    "rollout.steps": 32,
    "rollout.seed": 0,
    "rollout.policy": "orbit",
    "rollout.policy_seed": 0,

    "eval.revisit_db": 25.0,
    "eval.min_gap": 8,

    "service.port": 8765,
    "service.mode": "oracle",
}


def _cast(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(part) for part in raw.split(","))
    return raw


class Config:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        if values:
            bad = [k for k in values if k not in DEFAULTS]
            if bad:
                raise ConfigError(f"unknown config keys: {sorted(bad)}")
            self.values.update(values)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key}")
        return self.values[key]

    def set(self, key: str, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        self.values[key] = value if not isinstance(value, str) else _cast(key, value)

    def apply_assignments(self, assignments):
        """key=value strings from a file or command line; unknown keys are
        collected and reported together."""
        bad = []
        for line in assignments:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                bad.append(key)
                continue
            self.values[key] = _cast(key, raw)
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")

    def load_file(self, path):
        text = Path(path).read_text(encoding="utf-8")
        self.apply_assignments(text.splitlines())

    def canonical(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    # typed views

    def model_config(self) -> ModelConfig:
        g = self.values
        return ModelConfig(
            S=g["model.S"], m=g["model.m"], l=g["model.l"],
            h=g["model.h"], w=g["model.w"],
            k_world=g["model.k_world"], k_camera=g["model.k_camera"],
            k_pixel=g["model.k_pixel"], hidden=g["model.hidden"],
            cond_dim=g["model.cond_dim"], c_w=g["model.c_w"],
            seed=g["model.seed"],
        )


def load_config(path=None, overrides=None) -> Config:
    cfg = Config()
    if path is not None:
        cfg.load_file(path)
    if overrides:
        cfg.apply_assignments(overrides)
    return cfg
