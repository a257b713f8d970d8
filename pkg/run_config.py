"""
Run configuration.

Single source of truth for:
- Every tunable of rig, synthesis, model, training and loss weighting
- JSON load/dump (one object per section, unknown keys rejected)
- The config hash recorded in dataset manifests
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, List, Optional

from runtime_paths import get_config_file


class ConfigError(ValueError):
    pass


@dataclass
class RigConfig:
    n_views: int = 4
    radius_mm: float = 600.0
    focal_px: float = 300.0
    image_size: List[int] = field(default_factory=lambda: [256, 256])
    elevation_jitter_deg: float = 15.0
    arc_deg: float = 360.0


@dataclass
class SynthesisConfig:
    heatmap_size: int = 64
    heatmap_sigma_px: float = 2.0
    peak_jitter_px: float = 0.0
    value_noise: float = 0.0
    feature_channels: int = 128
    feature_offset_px: float = 1.5
    soft_argmax_temperature: float = 1.0
    readout: str = "log"
    finger_flexion_max_deg: float = 90.0
    finger_abduction_deg: float = 20.0
    global_rotation: bool = True


@dataclass
class ModelConfig:
    depth: int = 3
    hidden: int = 256
    pe_bone_bands: int = 5
    pe_order_bands: int = 2
    pre_scale: float = 100.0
    use_gsd: bool = True
    use_pe: bool = True
    per_bone_sharing: bool = True
    dup_threshold: float = 0.3


@dataclass
class TrainConfig:
    batch_size: int = 32
    stage1_epochs: int = 300
    stage1_lr: float = 1e-4
    stage1_halve_every: int = 50
    stage2_epochs: int = 100
    stage2_lr: float = 1e-4
    stage2_decay_epoch: int = 70
    stage2_decay_factor: float = 0.1
    validation_fraction: float = 0.05
    float32: bool = False
    progress: bool = True


@dataclass
class LossWeights:
    heatmap: float = 10.0
    skeleton_2d: float = 1.0
    vertex_2d: float = 0.1
    skeleton_3d: float = 1.0
    vertex_3d: float = 1.0

    def __post_init__(self) -> None:
        for item in fields(self):
            if getattr(self, item.name) < 0:
                raise ConfigError(f"loss.{item.name} must be nonnegative")


@dataclass
class PathsConfig:
    output_dir: str = "runs"
    dataset_dir: str = ""
    weights_path: str = ""
    template_path: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    template: str = "builtin"
    rig: RigConfig = field(default_factory=RigConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _coerce(value: Any, current: Any, key: str) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        return [int(v) for v in value]
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def _merge(instance: Any, data: Dict[str, Any], prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    known = {item.name for item in fields(instance)}
    updates: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown config key '{dotted}'")
        current = getattr(instance, key)
        if is_dataclass(current):
            updates[key] = _merge(current, value, dotted)
        else:
            updates[key] = _coerce(value, current, dotted)
    return replace(instance, **updates)


def validate_config(config: RunConfig) -> RunConfig:
    if config.rig.n_views < 2:
        raise ConfigError("rig.n_views must be at least 2")
    if not 2 <= config.model.depth <= 5:
        raise ConfigError("model.depth must be between 2 and 5")
    if not config.model.per_bone_sharing:
        raise ConfigError("model.per_bone_sharing=false (unshared per-bone networks) is not supported")
    if config.synthesis.readout not in {"log", "raw"}:
        raise ConfigError("synthesis.readout must be 'log' or 'raw'")
    if config.synthesis.feature_channels < 1:
        raise ConfigError("synthesis.feature_channels must be positive")
    if not 0.0 < config.train.validation_fraction < 1.0:
        raise ConfigError("train.validation_fraction must lie in (0, 1)")
    if config.train.batch_size < 1:
        raise ConfigError("train.batch_size must be positive")
    if len(config.rig.image_size) != 2:
        raise ConfigError("rig.image_size must be [width, height]")
    return config


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    return validate_config(_merge(RunConfig(), data, ""))


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return asdict(config)


def load_config(path: Optional[str] = None) -> RunConfig:
    """Read a JSON config; a missing default file yields the defaults."""
    explicit = path is not None
    path = path or get_config_file()
    if not os.path.exists(path):
        if explicit:
            raise ConfigError(f"config file not found: {path}")
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (e.g. {"rig.n_views": 8}); None values are skipped."""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return validate_config(_merge(config, nested, ""))


def save_config(config: RunConfig, path: str) -> None:
    temp_path = f"{path}.tmp"
    with open(temp_path, "w", encoding="utf-8") as handle:
        json.dump(config_to_dict(config), handle, indent=2, sort_keys=True)
        handle.write("\n")
    os.replace(temp_path, path)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
