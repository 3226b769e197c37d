from __future__ import annotations

import configparser
import json
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, get_args, get_origin

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError
from core.models import LabelMode, PoolMode, RotationMode, ShapeKind, SymmetryPlane
from core.runtime import default_threads


class _Section(BaseModel):
    # Unknown keys are typos until proven otherwise.
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class OptimizerConfig(_Section):
    base_lr: float = 0.3
    schedule_step: int = 10000
    schedule_factors: List[float] = Field(
        default_factory=lambda: [1.0, 0.3, 0.1, 0.01, 0.001, 0.0001]
    )
    weight_decay: float = 5e-4
    momentum: float = 0.9
    grad_clip_norm: Optional[float] = None

    @field_validator("base_lr")
    @classmethod
    def _positive_lr(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("base_lr must be > 0")
        return v

    @field_validator("schedule_factors")
    @classmethod
    def _non_increasing(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("schedule_factors must not be empty")
        if any(b > a for a, b in zip(v, v[1:])):
            raise ValueError("schedule_factors must be non-increasing")
        return v


class BackboneConfig(_Section):
    encoder_channels: List[int] = Field(default_factory=lambda: [8, 12, 16])
    bottleneck_channels: int = 24
    convs_per_block: int = 2
    pool_mode: PoolMode = PoolMode.AVERAGE
    use_batchnorm: bool = False
    in_channels: int = 4

    @classmethod
    def full_size(cls) -> "BackboneConfig":
        return cls(encoder_channels=[64, 96, 128, 160, 192, 224, 256], bottleneck_channels=256)

    @property
    def out_channels(self) -> int:
        return self.encoder_channels[0]


class HeadsConfig(_Section):
    hidden: int = 16
    use_batchnorm: bool = False


class DetectionConfig(_Section):
    num_classes: int = 4
    k: int = 16
    graph_conv_layers: int = 2
    alpha: float = 1.0
    iou_positive_threshold: float = 0.7
    nms_iou: float = 0.5
    max_proposals: int = 100
    min_detection_score: float = 0.05
    min_shape_points: int = 500
    voxel_size: float = 0.25
    embedding_dim: int = 32
    huber_delta: float = 1.0
    anchor_size: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    rotation_mode: RotationMode = RotationMode.YAW
    label_mode: LabelMode = LabelMode.DYNAMIC
    use_consolidation: bool = True
    use_shape_loss: bool = True
    shape_delta: float = 0.1
    ground_threshold_fraction: float = 0.05
    symmetry: Optional[SymmetryPlane] = SymmetryPlane.LONGITUDINAL
    sampled_iou_samples: int = 4096  # full-rotation mode only

    @field_validator("k")
    @classmethod
    def _k_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("k must be >= 1")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("alpha must be >= 0")
        return v


class EncoderConfig(_Section):
    channels: List[List[int]] = Field(default_factory=lambda: [[8, 16], [16, 24], [24, 24]])
    grid_resolution: int = 32
    embedding_dim: int = 32
    in_channels: int = 4
    pool_mode: PoolMode = PoolMode.AVERAGE
    use_batchnorm: bool = True
    fc_before_pool: bool = True

    @classmethod
    def full_size(cls) -> "EncoderConfig":
        return cls(channels=[[32, 64], [64, 128], [128, 128]], embedding_dim=128)


class DecoderConfig(_Section):
    conditional_blocks: int = 5
    hidden: int = 128
    embedding_dim: int = 32

    @classmethod
    def full_size(cls) -> "DecoderConfig":
        return cls(embedding_dim=128)


class PriorTrainConfig(_Section):
    iterations: int = 20000
    base_lr: float = 0.1
    n_near: int = 512
    n_uniform: int = 512
    near_sigma: float = 0.05
    n_input_points: int = 1024
    margin: float = 0.05
    crop_probability: float = 0.5
    min_crop_fraction: float = 0.5
    remove_internal: bool = True
    shuffle_labels: bool = False
    log_every: int = 100


class FitConfig(_Section):
    delta: float = 0.1
    iterations: int = 300
    base_lr: float = 1.0
    momentum: float = 0.9
    min_points: int = 10
    resolution: int = 100
    margin: float = 0.05
    include_surface: bool = False
    use_rays: bool = True
    ground_threshold_fraction: float = 0.05
    symmetry: Optional[SymmetryPlane] = None


class SceneConfig(_Section):
    min_objects: int = 5
    max_objects: int = 15
    kinds: List[ShapeKind] = Field(
        default_factory=lambda: [ShapeKind.SPHERE, ShapeKind.BOX, ShapeKind.CAPSULE, ShapeKind.VEHICLE]
    )
    scale_range: Tuple[float, float] = (1.5, 3.5)
    yaw_range_deg: float = 180.0
    extent: float = 16.0
    min_sensor_distance: float = 3.0
    ground: bool = True
    noise_sigma: float = 0.01
    sensor_height: float = 1.8
    n_azimuth: int = 360
    n_elevation: int = 24
    elevation_range_deg: Tuple[float, float] = (-25.0, 5.0)
    max_range: float = 60.0
    max_placement_retries: int = 200
    object_gap: float = 0.3
    box_padding: float = 0.05  # gt boxes enclose the shape plus this margin (noise stays inside)
    max_trace_steps: int = 96


class DetectTrainConfig(_Section):
    iterations: int = 4000
    scenes_per_batch: int = 1
    augment: bool = True
    rotation_range_deg: float = 10.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    log_every: int = 50
    prior_checkpoint: Optional[str] = None


class RunSection(_Section):
    seed: int = 0
    threads: int = Field(default_factory=default_threads)
    deterministic: bool = True
    precision: str = "double"

    @field_validator("precision")
    @classmethod
    def _precision(cls, v: str) -> str:
        if v not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        return v


class RunConfig(_Section):
    """Merged view of every section; every field has a default."""
    run: RunSection = Field(default_factory=RunSection)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    heads: HeadsConfig = Field(default_factory=HeadsConfig)
    detection: DetectionConfig = Field(default_factory=DetectionConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    prior: PriorTrainConfig = Field(default_factory=PriorTrainConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    train: DetectTrainConfig = Field(default_factory=DetectTrainConfig)

    @model_validator(mode="after")
    def _embedding_dims_agree(self) -> "RunConfig":
        dims = {self.encoder.embedding_dim, self.decoder.embedding_dim}
        if len(dims) != 1:
            raise ValueError(
                "encoder.embedding_dim and decoder.embedding_dim must match, "
                f"got {self.encoder.embedding_dim} and {self.decoder.embedding_dim}"
            )
        return self

    def echo(self) -> str:
        """Flat key = value rendering of the effective configuration."""
        lines: List[str] = []
        for section, values in self.model_dump(mode="json").items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines)


def _is_sequence_field(section: str, key: str) -> bool:
    section_field = RunConfig.model_fields.get(section)
    if section_field is None:
        return False
    field_info = section_field.annotation.model_fields.get(key)
    if field_info is None:
        return False
    pending = [field_info.annotation]
    while pending:
        tp = pending.pop()
        if get_origin(tp) in (list, tuple):
            return True
        pending.extend(get_args(tp))
    return False


def _decode_value(raw: str, sequence: bool = False):
    """
    Values are plain strings, left for pydantic to coerce. List and tuple
    fields also accept JSON lists and comma-separated items.
    """
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if not sequence:
        return text
    if text[:1] in "[(":
        try:
            return json.loads(text.replace("(", "[").replace(")", "]"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Malformed list value {raw!r}: {exc}") from exc
    return [part.strip() for part in text.split(",") if part.strip()]


def _nest(flat: Mapping[str, str]) -> Dict[str, Dict[str, object]]:
    nested: Dict[str, Dict[str, object]] = {}
    for dotted, raw in flat.items():
        if "." not in dotted:
            raise ConfigError(f"Override {dotted!r} must look like section.key=value")
        section, key = (part.strip() for part in dotted.split(".", 1))
        nested.setdefault(section, {})[key] = _decode_value(str(raw), _is_sequence_field(section, key))
    return nested


def _validation_message(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err.get("loc", ()))
    return f"{where}: {err.get('msg')}"


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Load a ``[section] key = value`` file and apply ``section.key`` overrides.

    Unknown sections and keys are rejected with a ConfigError naming them.
    """
    flat: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"Malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                flat[f"{section}.{key}"] = value
    for key, value in (overrides or {}).items():
        flat[key] = value

    nested = _nest(flat)
    known = set(RunConfig.model_fields)
    for section in nested:
        if section not in known:
            raise ConfigError(f"Unknown config section {section!r}")

    try:
        return RunConfig.model_validate(nested)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config value {_validation_message(exc)}") from exc
