"""Run configuration: a validated JSON file with environment overrides.

Unknown keys are rejected so typos fail loudly.  Any field can be
overridden by an environment variable named FSACDM_<FIELD> (uppercased;
path entries use FSACDM_CORPUS_DIR and FSACDM_RUN_DIR).  Loading,
serializing, and reloading a config yields an identical object.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .corpus import VOCAB
from .diffusion import CL_DENOMINATORS


class ConfigError(ValueError):
    """Invalid configuration contents or file."""


@dataclass
class RunConfig:
    seed: int = 0
    image_height: int = 32
    image_width: int = 128
    vocab: tuple = VOCAB
    d_model: int = 64
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lam: float = 0.005          # JSON key "lambda"
    beta_fa: float = 0.02
    tau: float = 0.5
    num_negatives: int = 5
    cl_denominator: str = "with_positive"
    exp_clamp: float = 10.0
    batch: int = 8
    lr: float = 1e-4
    steps: int = 3000
    ccam_blocks: int = 2
    crossattn_blocks: int = 2
    conv_channels: tuple = (16, 32, 64, 64)
    unet_channels: tuple = (8, 16, 32)
    checkpoint_every: int = 500
    corpus_count: int = 8
    threads: int = 1
    corpus_dir: str = "corpus"
    run_dir: str = "run"

    def validate(self) -> "RunConfig":
        checks = [
            (self.seed >= 0, "seed must be >= 0"),
            (self.image_height % 4 == 0 and self.image_height >= 8,
             "image_height must be a multiple of 4, >= 8"),
            (self.image_width % 4 == 0 and self.image_width >= 8,
             "image_width must be a multiple of 4, >= 8"),
            (len(self.vocab) > 0, "vocab must be non-empty"),
            (self.d_model > 0 and self.d_model % 2 == 0, "d_model must be positive and even"),
            (self.T >= 1, "T must be >= 1"),
            (0 < self.beta_start <= self.beta_end < 1,
             "need 0 < beta_start <= beta_end < 1"),
            (self.lam >= 0, "lambda must be >= 0"),
            (self.beta_fa >= 0, "beta_fa must be >= 0"),
            (self.tau > 0, "tau must be > 0"),
            (self.num_negatives >= 1, "num_negatives must be >= 1"),
            (self.cl_denominator in CL_DENOMINATORS,
             f"cl_denominator must be one of {CL_DENOMINATORS}"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.lam == 0 or self.batch > self.num_negatives,
             "batch must exceed num_negatives when lambda > 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.ccam_blocks >= 0, "ccam_blocks must be >= 0"),
            (self.crossattn_blocks >= 0, "crossattn_blocks must be >= 0"),
            (len(self.conv_channels) == 4 and all(c > 0 for c in self.conv_channels),
             "conv_channels must be 4 positive ints"),
            (len(self.unet_channels) == 3 and all(c > 0 for c in self.unet_channels),
             "unet_channels must be 3 positive ints"),
            (self.checkpoint_every >= 1, "checkpoint_every must be >= 1"),
            (self.corpus_count >= 1, "corpus_count must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


_JSON_KEYS = {"lam": "lambda"}
_ATTR_KEYS = {v: k for k, v in _JSON_KEYS.items()}
_TUPLE_FIELDS = {"vocab", "conv_channels", "unet_channels"}
_PATH_FIELDS = ("corpus_dir", "run_dir")


def to_json_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name in _PATH_FIELDS:
            continue
        key = _JSON_KEYS.get(f.name, f.name)
        value = getattr(cfg, f.name)
        out[key] = list(value) if isinstance(value, tuple) else value
    out["paths"] = {name: getattr(cfg, name) for name in _PATH_FIELDS}
    return out


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(cfg), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def from_json_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    known = {f.name for f in dataclasses.fields(RunConfig)} - set(_PATH_FIELDS)
    kwargs = {}
    for key, value in raw.items():
        if key == "paths":
            if not isinstance(value, dict):
                raise ConfigError("paths must be an object")
            for pk, pv in value.items():
                if pk not in _PATH_FIELDS:
                    raise ConfigError(f"unknown path key {pk!r}")
                if not isinstance(pv, str):
                    raise ConfigError(f"path {pk!r} must be a string")
                kwargs[pk] = pv
            continue
        attr = _ATTR_KEYS.get(key, key)
        if attr not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[attr] = tuple(value) if attr in _TUPLE_FIELDS else value
    cfg = RunConfig(**kwargs)
    _check_types(cfg)
    return cfg.validate()


def _check_types(cfg: RunConfig) -> None:
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        name = _JSON_KEYS.get(f.name, f.name)
        if f.name in _TUPLE_FIELDS:
            if f.name == "vocab":
                if not all(isinstance(v, str) for v in value):
                    raise ConfigError("vocab entries must be strings")
            elif not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{name} entries must be integers")
        elif f.name in _PATH_FIELDS or f.name == "cl_denominator":
            if not isinstance(value, str):
                raise ConfigError(f"{name} must be a string")
        elif f.type == "int":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer")
        elif f.type == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number")
            setattr(cfg, f.name, float(value))


def apply_env_overrides(cfg: RunConfig, environ=None) -> RunConfig:
    """Apply FSACDM_* environment variables on top of a config."""
    env = os.environ if environ is None else environ
    for f in dataclasses.fields(cfg):
        var = f"FSACDM_{f.name.upper()}"
        if var not in env:
            continue
        raw = env[var]
        try:
            if f.name in _TUPLE_FIELDS:
                parts = [p for p in raw.replace(",", " ").split() if p]
                value = tuple(parts) if f.name == "vocab" else tuple(int(p) for p in parts)
            elif f.type == "int":
                value = int(raw)
            elif f.type == "float":
                value = float(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value for {var}: {raw!r}") from None
        setattr(cfg, f.name, value)
    return cfg.validate()


def load_config(path=None, environ=None, **overrides) -> RunConfig:
    """Load, apply environment then keyword overrides, and validate."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        cfg = from_json_dict(raw)
    cfg = apply_env_overrides(cfg, environ)
    for key, value in overrides.items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()
