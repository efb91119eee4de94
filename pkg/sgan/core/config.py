from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from threading import RLock
from typing import Any, Literal, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


CONFIG_PATH = Path("pipeline.yaml")

Variant = Literal["baseline", "sgan_sal_seed", "sgan_seed", "sgan_cls", "sgan_seg", "sgan"]
SeedSource = Literal["cls", "seg", "ensemble"]

VARIANTS: tuple[str, ...] = ("baseline", "sgan_sal_seed", "sgan_seed", "sgan_cls", "sgan_seg", "sgan")


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SaliencyCorruption(_Section):
    dilate_px: int = Field(0, ge=0)
    erode_px: int = Field(0, ge=0)
    hole_prob: float = Field(0.0, ge=0.0, le=1.0)
    hole_tile: int = Field(4, ge=1)


class DatasetConfig(_Section):
    image_size: int = Field(64, ge=8)
    num_classes: int = Field(5, ge=1, le=5)
    min_shapes: int = Field(1, ge=1)
    max_shapes: int = Field(3, ge=1)
    shape_size: tuple[int, int] = (16, 26)
    co_occurrence_bias: bool = False
    biased_class: int = Field(1, ge=1)
    band_probability: float = Field(0.3, ge=0.0, le=1.0)
    pixel_noise: float = Field(10.0, ge=0.0)
    min_visible: float = Field(0.3, ge=0.0, le=1.0)
    max_placement_retries: int = Field(50, ge=1)
    saliency_corruption: SaliencyCorruption = Field(default_factory=SaliencyCorruption)
    rng_seed: int = Field(20200117, ge=0, lt=2**64)
    train: int = Field(200, ge=0)
    val: int = Field(50, ge=0)

    @model_validator(mode="after")
    def _check(self) -> DatasetConfig:
        if self.min_shapes > self.max_shapes:
            raise ValueError("dataset.min_shapes must not exceed dataset.max_shapes")
        if self.max_shapes > self.num_classes:
            raise ValueError("dataset.max_shapes must not exceed dataset.num_classes (one shape per class)")
        lo, hi = self.shape_size
        if not 4 <= lo <= hi <= self.image_size // 2:
            raise ValueError("dataset.shape_size must satisfy 4 <= min <= max <= image_size/2")
        if self.biased_class > self.num_classes:
            raise ValueError("dataset.biased_class must be a valid class index")
        return self


class BackboneConfig(_Section):
    in_channels: int = Field(3, ge=1)
    block_channels: list[int] = Field(default_factory=lambda: [16, 32, 64, 64])
    pool_after: list[int] = Field(default_factory=lambda: [0, 1])
    feature_channels: int = Field(64, ge=1)
    kernel_size: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _check(self) -> BackboneConfig:
        if not self.block_channels or self.block_channels[-1] != self.feature_channels:
            raise ValueError("backbone.feature_channels must equal the last entry of block_channels")
        if any(not 0 <= i < len(self.block_channels) for i in self.pool_after):
            raise ValueError("backbone.pool_after indexes a block that does not exist")
        if self.kernel_size % 2 == 0:
            raise ValueError("backbone.kernel_size must be odd")
        return self

    @property
    def stride(self) -> int:
        return 2 ** len(set(self.pool_after))


class SganConfig(_Section):
    lambda_: float = Field(0.15, ge=0.0, alias="lambda")
    saliency_threshold: float = Field(0.5, ge=0.0, le=1.0)
    projection_noise: float = Field(0.01, ge=0.0)


class SeedThresholds(_Section):
    initial: float = Field(0.3, ge=0.0, le=1.0)
    alpha: float = Field(0.2, ge=0.0, le=1.0)
    beta: float = Field(0.06, ge=0.0, le=1.0)


class CrfParams(_Section):
    w_spatial: float = Field(3.0, ge=0.0)
    w_bilateral: float = Field(5.0, ge=0.0)
    theta_gamma: float = Field(3.0, gt=0.0)
    theta_alpha: float = Field(30.0, gt=0.0)
    theta_beta: float = Field(10.0, gt=0.0)
    iterations: int = Field(5, ge=0)
    max_positions: int = Field(4096, ge=1)
    refresh_interval: int = Field(20, ge=1)


class OptimizerConfig(_Section):
    base_lr: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    lr_decay: float = Field(0.3, gt=0.0, le=1.0)
    lr_steps: list[int] = Field(default_factory=lambda: [1000, 1500])


class TrainConfig(_Section):
    batch_size: int = Field(8, ge=1)
    iterations: int = Field(2000, ge=0)
    log_interval: int = Field(20, ge=1)
    flip: bool = True
    dtype: Literal["f32", "f64"] = "f32"


class SegConfig(_Section):
    boundary_weight: float = Field(1.0, ge=0.0)
    init_from_baseline: bool = True
    iterations: int | None = Field(None, ge=0)


class PipelineConfig(_Section):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    sgan: SganConfig = Field(default_factory=SganConfig)
    thresholds: SeedThresholds = Field(default_factory=SeedThresholds)
    crf: CrfParams = Field(default_factory=CrfParams)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    seg: SegConfig = Field(default_factory=SegConfig)
    variant: Variant = "sgan"
    seed_source: SeedSource | None = None
    semi_fraction: float = Field(0.0, ge=0.0, le=1.0)
    misspread_class: int | None = None
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    reference: dict[str, Any] = Field(default_factory=dict)

    @field_validator("variant", mode="before")
    @classmethod
    def _normalize_variant(cls, v: Any) -> Any:
        return v.strip().lower().replace("-", "_") if isinstance(v, str) else v

    @model_validator(mode="after")
    def _check(self) -> PipelineConfig:
        if self.dataset.image_size % self.backbone.stride:
            raise ValueError(
                f"dataset.image_size {self.dataset.image_size} is not divisible by the backbone stride {self.backbone.stride}"
            )
        if self.backbone.in_channels != 3:
            raise ValueError("backbone.in_channels must be 3 for RGB samples")
        return self

    @property
    def resolved_seed_source(self) -> SeedSource:
        if self.seed_source is not None:
            return self.seed_source
        return {"sgan_cls": "cls", "sgan_seg": "seg", "sgan": "ensemble"}.get(self.variant, "cls")

    @property
    def seg_iterations(self) -> int:
        return self.train.iterations if self.seg.iterations is None else self.seg.iterations

    def dump(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


def apply_overrides(data: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars/lists."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = yaml.safe_load(raw)
    return data


@dataclass
class ConfigManager:
    path: Path = CONFIG_PATH

    def __post_init__(self) -> None:
        self.path = Path(self.path)
        self._lock = RLock()

    def load(self) -> dict[str, Any]:
        with self._lock:
            if not self.path.exists():
                raise ConfigError(f"config file not found: {self.path}")
            with self.path.open("r", encoding="utf-8") as f:
                try:
                    data = yaml.safe_load(f) or {}
                except yaml.YAMLError as exc:
                    raise ConfigError(f"{self.path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{self.path}: top level must be a mapping")
        return data

    def resolve(self, overrides: Sequence[str] = ()) -> PipelineConfig:
        data = apply_overrides(self.load(), overrides)
        return validate_config(data)

    def save(self, data: dict[str, Any] | PipelineConfig) -> None:
        if isinstance(data, PipelineConfig):
            data = data.dump()
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", encoding="utf-8") as f:
                yaml.safe_dump(data, f, allow_unicode=True, sort_keys=False)


def validate_config(data: dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
