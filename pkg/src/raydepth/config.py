"""Run configuration: dataclasses plus strict JSON loading.

Unknown keys are rejected with their full key path so typos fail loudly.
An empty JSON object yields the defaults (16 planes over [1e-3, 10] m,
downscale 4, fused mode, refinement on).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class PlanesConfig:
    count: int = 16
    d_min: float = 1e-3
    d_max: float = 10.0


@dataclass
class LossConfig:
    use_l1: bool = True
    use_l2: bool = False
    use_ce: bool = True
    spn_l1: bool = False

    def enabled_terms(self):
        terms = []
        if self.use_l1:
            terms.append("l1")
        if self.use_l2:
            terms.append("l2")
        if self.use_ce:
            terms.append("ce")
        return terms


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    milestones: tuple = ()
    epochs: int = 30


@dataclass
class PathsConfig:
    sequence_dir: str | None = None
    out_dir: str | None = None
    checkpoint: str | None = None
    scene: str | None = None


@dataclass
class RunConfig:
    planes: PlanesConfig = field(default_factory=PlanesConfig)
    channels: int = 16
    image_channels: tuple = (4, 4, 4)
    downscale: int = 4
    mode: str = "fused"
    refinement: bool = True
    refine_iterations: int = 6
    refine_channels: int = 8
    residual: bool = True
    heads: int = 1
    share_self_attention: bool = False
    mask_invalid_previous: bool = False
    temporal_grad: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    sparse_count: int | None = 300
    sparse_fraction: float | None = None
    eval_range: tuple | None = None
    resample_sparse: bool = True


_SECTIONS = {
    "planes": PlanesConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "paths": PathsConfig,
}
_LIST_FIELDS = {"image_channels", "milestones", "eval_range"}


def _fill(cls, raw, prefix):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            kwargs[key] = _fill(_SECTIONS[key], value, path + ".")
        elif key in _LIST_FIELDS:
            if value is not None and not isinstance(value, list):
                raise ConfigError(f"config key {path!r} must be a list")
            kwargs[key] = tuple(value) if value is not None else None
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config near {prefix or 'top level'}: {exc}") from exc


def validate_config(cfg):
    if cfg.planes.count < 2:
        raise ConfigError(f"planes.count must be >= 2, got {cfg.planes.count}")
    if not (0 < cfg.planes.d_min < cfg.planes.d_max):
        raise ConfigError("planes must satisfy 0 < d_min < d_max")
    if cfg.downscale not in (1, 2, 4):
        raise ConfigError(f"downscale must be 1, 2, or 4, got {cfg.downscale}")
    if cfg.mode not in ("fused", "single_view"):
        raise ConfigError(f"mode must be 'fused' or 'single_view', got {cfg.mode!r}")
    if cfg.channels < 2 or cfg.channels % 2:
        raise ConfigError("channels must be even (depth positional encoding), got "
                          f"{cfg.channels}")
    if len(cfg.image_channels) != 3 or any(c < 1 for c in cfg.image_channels):
        raise ConfigError("image_channels must be three positive widths")
    if cfg.heads < 1 or cfg.channels % cfg.heads:
        raise ConfigError(f"heads must divide channels, got {cfg.heads} vs {cfg.channels}")
    if cfg.refine_iterations < 0:
        raise ConfigError("refine_iterations must be >= 0")
    if not cfg.loss.enabled_terms():
        raise ConfigError("at least one loss term must be enabled")
    if (cfg.sparse_count is None) == (cfg.sparse_fraction is None):
        raise ConfigError("exactly one of sparse_count / sparse_fraction must be set")
    if cfg.sparse_fraction is not None and not (0 < cfg.sparse_fraction <= 1):
        raise ConfigError("sparse_fraction must lie in (0, 1]")
    if cfg.eval_range is not None:
        if len(cfg.eval_range) != 2 or not (cfg.eval_range[0] < cfg.eval_range[1]):
            raise ConfigError("eval_range must be [low, high] with low < high")
    if cfg.optimizer.epochs < 0 or cfg.optimizer.learning_rate <= 0:
        raise ConfigError("optimizer needs epochs >= 0 and a positive learning rate")
    for name in ("sequence_dir", "checkpoint", "scene"):
        path = getattr(cfg.paths, name)
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"paths.{name} does not exist: {path}")
    return cfg


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return validate_config(_fill(RunConfig, raw, ""))


def parse_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg):
    return {
        "planes": {"count": cfg.planes.count, "d_min": cfg.planes.d_min, "d_max": cfg.planes.d_max},
        "channels": cfg.channels,
        "image_channels": list(cfg.image_channels),
        "downscale": cfg.downscale,
        "mode": cfg.mode,
        "refinement": cfg.refinement,
        "refine_iterations": cfg.refine_iterations,
        "refine_channels": cfg.refine_channels,
        "residual": cfg.residual,
        "heads": cfg.heads,
        "share_self_attention": cfg.share_self_attention,
        "mask_invalid_previous": cfg.mask_invalid_previous,
        "temporal_grad": cfg.temporal_grad,
        "loss": {
            "use_l1": cfg.loss.use_l1,
            "use_l2": cfg.loss.use_l2,
            "use_ce": cfg.loss.use_ce,
            "spn_l1": cfg.loss.spn_l1,
        },
        "optimizer": {
            "learning_rate": cfg.optimizer.learning_rate,
            "weight_decay": cfg.optimizer.weight_decay,
            "milestones": list(cfg.optimizer.milestones),
            "epochs": cfg.optimizer.epochs,
        },
        "paths": {
            "sequence_dir": cfg.paths.sequence_dir,
            "out_dir": cfg.paths.out_dir,
            "checkpoint": cfg.paths.checkpoint,
            "scene": cfg.paths.scene,
        },
        "seed": cfg.seed,
        "sparse_count": cfg.sparse_count,
        "sparse_fraction": cfg.sparse_fraction,
        "eval_range": list(cfg.eval_range) if cfg.eval_range is not None else None,
        "resample_sparse": cfg.resample_sparse,
    }


def save_config(path, cfg):
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
