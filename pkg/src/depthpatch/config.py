"""Run configuration: dataclasses, JSON (de)serialization and validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from depthpatch.errors import ConfigError
from depthpatch.losses import LossConfig, TargetDepthSpec
from depthpatch.masks import DetectorConfig
from depthpatch.scene_io import SceneSpec
from depthpatch.transforms import TransformRanges


@dataclass(frozen=True)
class AttackConfig:
    epochs: int = 400
    learning_rate: float = 0.01
    patch_scale: float = 0.2
    patch_side: int = 100
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    transforms: TransformRanges = field(default_factory=TransformRanges)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    detector_backend: str = "annotation"
    placement_mode: str = "side"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"attack.epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"attack.learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.patch_scale <= 1.0:
            raise ConfigError(f"attack.patch_scale must be in (0, 1], got {self.patch_scale}")
        if self.patch_side < 2:
            raise ConfigError(f"attack.patch_side must be >= 2, got {self.patch_side}")
        if self.batch_size < 1:
            raise ConfigError(f"attack.batch_size must be >= 1, got {self.batch_size}")
        if self.detector_backend not in ("annotation", "oracle"):
            raise ConfigError(f"attack.detector_backend {self.detector_backend!r} is not supported")
        if self.placement_mode not in ("side", "area"):
            raise ConfigError(f"attack.placement_mode {self.placement_mode!r} is not supported")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"attack.dtype {self.dtype!r} is not supported")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # or "directory"
    path: str | None = None
    split: float | None = None
    n_scenes: int = 250
    seed: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigError(f"data.kind {self.kind!r} is not supported")
        if self.kind == "directory" and not self.path:
            raise ConfigError("data.path is required when data.kind is 'directory'")
        if self.n_scenes < 1:
            raise ConfigError(f"data.n_scenes must be >= 1, got {self.n_scenes}")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "toy"  # "toy", "analytic" or "file"
    path: str | None = None
    pretrain_scenes: int = 600
    pretrain_epochs: int = 40
    seed: int = 0
    base_channels: int = 8

    def __post_init__(self):
        if self.kind not in ("toy", "analytic", "file"):
            raise ConfigError(f"model.kind {self.kind!r} is not supported")
        if self.kind == "file" and not self.path:
            raise ConfigError("model.path is required when model.kind is 'file'")


@dataclass(frozen=True)
class RunConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    output_dir: str | None = None


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (frozenset, set)):
        return sorted(obj)
    if isinstance(obj, tuple):
        return [to_jsonable(v) for v in obj]
    return obj


_NESTED = {
    (AttackConfig, "loss"): LossConfig,
    (AttackConfig, "transforms"): TransformRanges,
    (AttackConfig, "detector"): DetectorConfig,
    (LossConfig, "target_depth"): TargetDepthSpec,
    (DataConfig, "scene"): SceneSpec,
    (RunConfig, "attack"): AttackConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
}


def from_dict(cls, data: dict, prefix: str = ""):
    """Build a (nested) config dataclass, naming the offending field on error."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown field {prefix}{sorted(unknown)[0]}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = from_dict(sub, value, f"{prefix}{key}.")
        elif key in ("adam_betas", "scale_jitter", "contrast") and isinstance(value, list):
            value = tuple(value)
        elif key == "target_classes" and value is not None:
            value = frozenset(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        msg = str(e)
        raise ConfigError(msg if msg.startswith(prefix) or not prefix else f"{prefix}{msg}") from None
    except TypeError as e:
        raise ConfigError(f"{prefix}: {e}") from None


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return from_dict(RunConfig, data)


def config_hash(cfg) -> str:
    blob = json.dumps(to_jsonable(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
