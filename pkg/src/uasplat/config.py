"""Run configuration: schema-validated dataclasses loaded from YAML with
dotted-key overrides. Unknown keys are fatal; every run echoes its fully
resolved config next to its outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np
import yaml

from .losses import LossWeights


@dataclass
class NetSettings:
    depth: int = 8
    width: int = 256
    skip_layers: tuple[int, ...] = (4,)
    l_xyz: int = 10
    l_t: int = 6


@dataclass
class RasterSettings:
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    t_min: float = 1e-4
    alpha_clamp: float = 0.99


@dataclass
class OcclusionSettings:
    pattern: str = "center-rectangle"  # center-rectangle | moving-bar | random-patches
    coverage: float = 0.5              # fraction of the subject bounding box
    affected_fraction: float = 0.8     # leading fraction of frames occluded
    color: tuple[float, float, float] = (0.02, 0.02, 0.05)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0 or not 0.0 <= self.affected_fraction <= 1.0:
            raise ValueError("occlusion fractions must lie in [0, 1]")
        if self.pattern not in ("center-rectangle", "moving-bar", "random-patches"):
            raise ValueError(f"unknown occlusion pattern {self.pattern!r}")


@dataclass
class SceneSettings:
    width: int = 64
    height: int = 64
    frames: int = 30
    gt_per_bone: int = 60
    seed: int = 0
    camera_distance: float = 3.2
    focal: float = 80.0
    background: tuple[float, float, float] = (0.72, 0.72, 0.76)
    motion_amplitude: float = 1.0
    holdout_cameras: int = 3
    occlusion: OcclusionSettings = field(default_factory=OcclusionSettings)

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


@dataclass
class TrainConfig:
    mode: str = "d"
    total_iters: int = 10000
    warmup_iters: int = 2000
    seed: int = 0
    determinism: bool = True
    frame_interval: int = 5
    n_gaussians: int = 500
    lr_means_init: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_rotations: float = 1.0e-3
    lr_log_scales: float = 5.0e-3
    lr_opacities: float = 5.0e-2
    lr_colors: float = 2.5e-3
    lr_net: float = 1.6e-4
    lr_sigma_scale: float = 1.0   # multiplier on lr_net for the sigma head only
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps_gaussian: float = 1e-15
    adam_eps_net: float = 1e-8
    temporal_samples: int = 2
    log_interval: int = 50
    prune_enabled: bool = False
    prune_opacity: float = 0.005
    prune_interval: int = 1000
    loss: LossWeights = field(default_factory=LossWeights)
    net: NetSettings = field(default_factory=NetSettings)
    raster: RasterSettings = field(default_factory=RasterSettings)

    def __post_init__(self):
        if self.mode.lower() not in ("a", "b", "c", "d"):
            raise ValueError(f"mode must be one of a/b/c/d, got {self.mode!r}")
        self.mode = self.mode.lower()
        if self.warmup_iters >= self.total_iters:
            raise ValueError("warmup must be shorter than the total iteration count")
        for name in ("lr_means_init", "lr_means_final", "lr_rotations", "lr_log_scales",
                     "lr_opacities", "lr_colors", "lr_net"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # the shared frame interval lives here; mirror it into the loss weights
        self.loss.frame_interval = self.frame_interval


@dataclass
class RunConfig:
    scene: SceneSettings = field(default_factory=SceneSettings)
    train: TrainConfig = field(default_factory=TrainConfig)


_DATACLASS_REGISTRY = {
    c.__name__: c
    for c in (NetSettings, RasterSettings, OcclusionSettings, SceneSettings,
              TrainConfig, RunConfig, LossWeights)
}


_TUPLE_FIELDS = {"skip_layers", "color", "background"}


def _field_dataclass(f) -> type | None:
    t = f.type
    if isinstance(t, str):
        t = _DATACLASS_REGISTRY.get(t)
    return t if isinstance(t, type) and is_dataclass(t) else None


def _build_dataclass(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ValueError(f"config section '{path or cls.__name__}' must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config key(s) under '{path or '.'}': {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        nested = _field_dataclass(known[name])
        if nested is not None:
            kwargs[name] = _build_dataclass(nested, value, sub)
        elif isinstance(value, dict):
            raise ValueError(f"config key '{sub}' does not accept a mapping")
        elif name in _TUPLE_FIELDS:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(cfg) -> dict:
    def conv(v):
        if is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in fields(v)}
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        if isinstance(v, np.generic):
            return v.item()
        return v
    return conv(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _build_dataclass(RunConfig, data or {})


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply 'a.b.c=value' overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override path {key!r} crosses a non-mapping entry")
        node[parts[-1]] = value
    return data


def load_config_text(text: str) -> RunConfig:
    data = yaml.safe_load(text) or {}
    return config_from_dict(data)


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError("config file must contain a mapping at the top level")
    apply_overrides(data, overrides or [])
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()
