"""Run configuration: JSON file + key=value overrides, validated up front."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .conditioners import VARIANTS
from .denoiser import RATIOS, STRATEGIES

INIT_MODES = ("random", "kaiming", "gp")


class ConfigError(ValueError):
    """Invalid configuration; maps to CLI exit code 2."""


@dataclass
class RunConfig:
    # data
    data_root: Optional[str] = None
    image_size: Tuple[int, int] = (64, 64)
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    # schedule (desk default T=100; the paper-scale T=500 is honored via config)
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # model
    widths: Tuple[int, int, int, int] = (64, 128, 256, 512)
    small: bool = True
    strategy: str = "crisscross"
    ratio: str = "2:2"
    variant: str = "full"
    init: str = "random"
    gp_checkpoint: Optional[str] = None
    # optimization (lr 1e-5 / batch 6 are the reference defaults)
    lr: float = 1e-5
    injector_lr_mult: float = 1.0
    iterations: int = 2000
    batch_size: int = 6
    pretrain_steps: int = 1000
    pretrain_lr: float = 2e-4
    # inference
    ensemble_k: int = 25
    threshold: float = 0.5
    sample_T: Optional[int] = None  # reverse-chain length at inference; None = T
    # bookkeeping
    seed: int = 0
    out_dir: str = "runs/run0"

    def validate(self) -> "RunConfig":
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ConfigError(f"bad beta range ({self.beta_start}, {self.beta_end})")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.ratio not in RATIOS:
            raise ConfigError(f"ratio must be one of {RATIOS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}")
        if self.init == "gp" and not self.gp_checkpoint:
            raise ConfigError("init=gp requires gp_checkpoint")
        if self.ensemble_k < 1:
            raise ConfigError("ensemble_k must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must be in (0,1)")
        if self.iterations < 1 or self.batch_size < 1 or self.pretrain_steps < 1:
            raise ConfigError("iterations/batch_size/pretrain_steps must be positive")
        if self.injector_lr_mult <= 0:
            raise ConfigError("injector_lr_mult must be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")
        h, w = self.image_size
        if h % 32 or w % 32:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 32")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    if not isinstance(value, str):
        return value
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value  # bare strings (e.g. crisscross) stay strings
    return parsed


def load_config(path: Optional[str] = None, overrides=()) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus key=value overrides.

    The CRIDIFF_OUT_ROOT environment variable, when set, is prepended to a
    relative out_dir.
    """
    values = {}
    if path:
        with open(path) as fh:
            values.update(json.load(fh))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        values[k] = v
    kwargs = {}
    for k, v in values.items():
        v = _coerce(k, v)
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    cfg = RunConfig(**kwargs)
    root = os.environ.get("CRIDIFF_OUT_ROOT")
    if root and not os.path.isabs(cfg.out_dir):
        cfg.out_dir = os.path.join(root, cfg.out_dir)
    return cfg.validate()
