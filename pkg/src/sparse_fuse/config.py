# Copyright 2026 sparse-fuse contributors

"""Configuration models and the YAML loader.

Every setting lives in a pydantic model. `load_settings` reads an optional YAML file,
applies dotted `key=value` overrides and validates the result; any failure surfaces
as a `ConfigError`.
"""

import logging
import os
from pathlib import Path
from typing import Literal

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from sparse_fuse.errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "SPARSE_FUSE_THREADS"
SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneConfig(_Section):
    """Synthetic scenes and the camera rig that observes them."""

    num_cameras: int = Field(default=6, ge=1)
    camera_spacing_deg: float = 60.0
    image_width: int = Field(default=64, ge=4)
    image_height: int = Field(default=32, ge=4)
    fov_deg: float = Field(default=90.0, gt=0.0, lt=180.0)
    num_scales: int = Field(default=2, ge=1)
    channels: int = Field(default=32, ge=3)
    num_objects: int = Field(default=8, ge=0)
    frames: int = Field(default=40, ge=1)
    fps: float = Field(default=2.0, gt=0.0)
    min_range: float = Field(default=5.0, ge=0.0)
    max_range: float = Field(default=20.0, gt=0.0)
    max_speed: float = Field(default=4.0, ge=0.0)
    ego_speed: float = Field(default=3.0, ge=0.0)
    ego_yaw_rate: float = 0.05
    noise_level: float = Field(default=0.05, ge=0.0)
    surface_samples: int = Field(default=24, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.min_range >= self.max_range:
            raise ValueError("min_range must be smaller than max_range")
        return self

    def scale_shape(self, scale: int) -> tuple[int, int]:
        """(height, width) of the feature map at `scale`; stride 2**(scale + 1)."""
        return (
            max(2, self.image_height >> (scale + 1)),
            max(2, self.image_width >> (scale + 1)),
        )


class DecoderConfig(_Section):
    """Decoder topology; field defaults are the full-scale values."""

    num_single_frame_layers: int = Field(default=1, ge=0)
    num_multi_frame_layers: int = Field(default=5, ge=0)
    total_instances: int = Field(default=900, ge=1)
    temporal_instances: int = Field(default=600, ge=0)
    feature_dim: int = Field(default=256, ge=2)
    heads: int = Field(default=8, ge=1)
    num_learnable_keypoints: int = Field(default=6, ge=0)
    groups: int = Field(default=8, ge=1)
    equivalent_focal: float = Field(default=500.0, gt=0.0)
    camera_encoding: bool = True
    temporal: bool = True
    detach_anchors: bool = True
    min_size: float = Field(default=0.05, gt=0.0)
    anchor_range: float = Field(default=20.0, gt=0.0)
    anchor_size: float = Field(default=1.5, gt=0.0)
    track_velocity: bool = True
    track_prior_s: float = Field(default=1.0, gt=0.0)

    @model_validator(mode="after")
    def _check_topology(self):
        if self.num_layers < 1:
            raise ValueError("the decoder needs at least one layer")
        if self.temporal_instances >= self.total_instances:
            raise ValueError("temporal_instances must be smaller than total_instances")
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")
        return self

    @property
    def num_layers(self) -> int:
        """Single-frame plus multi-frame layers."""
        return self.num_single_frame_layers + self.num_multi_frame_layers

    @property
    def num_keypoints(self) -> int:
        """Seven fixed keypoints plus the learnable ones."""
        return 7 + self.num_learnable_keypoints

    @classmethod
    def desk(cls) -> "DecoderConfig":
        """The full-scale topology at a tenth of the instances."""
        return cls(
            total_instances=90,
            temporal_instances=60,
            feature_dim=64,
            heads=4,
            groups=4,
            equivalent_focal=32.0,
        )


class TrainConfig(_Section):
    """Toy training loop."""

    epochs: int = Field(default=1, ge=0)
    max_steps: int | None = Field(default=None, ge=0)
    num_scenes: int = Field(default=2, ge=1)
    frames_per_scene: int | None = Field(default=10, ge=1)
    learning_rate: float = Field(default=2e-3, gt=0.0)
    grad_clip: float = Field(default=5.0, gt=0.0)
    depth_supervision: bool = True
    box_weight: float = Field(default=0.25, ge=0.0)
    cls_weight: float = Field(default=2.0, ge=0.0)
    depth_weight: float = Field(default=0.5, ge=0.0)
    focal_alpha: float = Field(default=0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)
    moving_average: int = Field(default=20, ge=1)


class BenchConfig(_Section):
    """Recurrent vs multi-frame sampling benchmark."""

    modes: list[Literal["recurrent", "multiframe"]] = ["recurrent", "multiframe"]
    t_values: list[int] = [1, 2, 4, 8]
    repeats: int = Field(default=1, ge=1)
    frames: int | None = Field(default=None, ge=1)
    warmup: int = Field(default=2, ge=0)

    @field_validator("t_values")
    @classmethod
    def _positive(cls, values: list[int]) -> list[int]:
        if not values or min(values) < 1:
            raise ValueError("t_values must be a non-empty list of positive integers")
        return values


class EvalConfig(_Section):
    """Matching radius and the detections kept for the desk metrics.

    `top_k` keeps the most confident detections of every frame instead of applying
    `score_threshold`.
    """

    match_radius: float = Field(default=2.0, gt=0.0)
    score_threshold: float = Field(default=0.3, ge=0.0, le=1.0)
    top_k: int | None = Field(default=None, ge=1)


class VerifyConfig(_Section):
    """Case counts of the verification suite."""

    aggregation_cases: int = Field(default=100, ge=1)
    gradient_cases: int = Field(default=100, ge=1)
    geometry_cases: int = Field(default=10_000, ge=1)
    permutation_cases: int = Field(default=3, ge=1)
    equivalence_tol: float = 1e-10
    gradient_tol: float = 1e-5
    decoder_gradient_tol: float = 1e-4
    geometry_tol: float = 1e-9


class Settings(_Section):
    """Everything a run needs; the defaults are the desk-scale configuration."""

    seed: int = 0
    scene: SceneConfig = Field(default_factory=SceneConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig.desk)
    train: TrainConfig = Field(default_factory=TrainConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)

    @model_validator(mode="after")
    def _check_groups(self):
        if self.scene.channels % self.decoder.groups:
            raise ValueError(
                f"decoder.groups={self.decoder.groups} does not divide "
                f"scene.channels={self.scene.channels}"
            )
        return self

    @classmethod
    def desk(cls) -> "Settings":
        """Desk-scale defaults."""
        return cls()


class RunConfig(_Section):
    """One CLI invocation: subcommand plus the flags common to all of them."""

    subcommand: Literal["verify", "bench", "simulate", "train", "compare"]
    config: Path | None = None
    seed: int | None = None
    out: Path = Path("out")
    overrides: list[str] = []

    @field_validator("overrides")
    @classmethod
    def _key_value(cls, values: list[str]) -> list[str]:
        for item in values:
            key, sep, _ = item.partition("=")
            if not sep or not key.strip():
                raise ValueError(f"override {item!r} is not of the form key=value")
        return values


def _apply_override(data: dict, item: str):
    key, _, raw = item.partition("=")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override {item!r}: {e}") from e
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {item!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = value


def load_settings(
    path: Path | str | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    seed: int | None = None,
) -> Settings:
    """Read, override and validate the settings."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text())
        except OSError as e:
            logger.error("Cannot read config %s: %s", path, e)
            raise ConfigError(f"cannot read {path}: {e}") from e
        except yaml.YAMLError as e:
            logger.error("Config %s is not valid YAML", path)
            raise ConfigError(f"{path} is not valid YAML: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping at the top level")
        data = loaded or {}
    for item in overrides:
        _apply_override(data, item)
    if seed is not None:
        data["seed"] = seed
    try:
        settings = Settings.model_validate(data)
    except pydantic.ValidationError as e:
        logger.error("Invalid configuration: %s", e)
        raise ConfigError(str(e)) from e
    logger.debug("Resolved settings: %s", settings.model_dump())
    return settings


def threads_from_env(environ=None) -> int:
    """Worker cap from SPARSE_FUSE_THREADS; 1 when unset."""
    environ = os.environ if environ is None else environ
    raw = environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1, got {count}")
    return count
