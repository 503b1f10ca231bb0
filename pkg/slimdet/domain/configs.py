"""
Validated configuration models for training, augmentation and losses.
"""
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class FreezeMode(str, Enum):
    NONE = "none"
    BACKBONE = "backbone"
    BACKBONE_NECK = "backbone_neck"


class InitMode(str, Enum):
    SCRATCH = "scratch"
    WEIGHTS = "weights"


class LossWeights(BaseModel):
    """Per-term multipliers; all 1 reproduces the plain sum of the four losses."""

    ciou: float = Field(default=1.0, ge=0.0)
    obj: float = Field(default=1.0, ge=0.0)
    noobj: float = Field(default=1.0, ge=0.0)
    cls: float = Field(default=1.0, ge=0.0)


class SparsityConfig(BaseModel):
    """L1 penalty on batch-norm gamma of prunable layers."""

    lam: float = Field(default=0.0, ge=0.0, description="L1 coefficient on |gamma|")

    @property
    def enabled(self) -> bool:
        return self.lam > 0.0


class AugmentConfig(BaseModel):
    """Probabilities and ranges of the seeded photometric/geometric transforms."""

    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    crop_prob: float = Field(default=0.3, ge=0.0, le=1.0)
    crop_min_scale: float = Field(default=0.6, gt=0.0, le=1.0)
    jitter_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    hue_gain: float = Field(default=0.015, ge=0.0, le=0.5)
    saturation_gain: float = Field(default=0.5, ge=0.0, le=1.0)
    value_gain: float = Field(default=0.3, ge=0.0, le=1.0)
    blur_prob: float = Field(default=0.1, ge=0.0, le=1.0)
    blur_max_radius: float = Field(default=1.5, ge=0.0)
    affine_prob: float = Field(default=0.3, ge=0.0, le=1.0)
    rotate_deg: float = Field(default=10.0, ge=0.0, le=180.0)
    scale_range: float = Field(default=0.1, ge=0.0, lt=1.0)
    translate: float = Field(default=0.1, ge=0.0, lt=0.5)
    mosaic_min: float = Field(default=0.3, gt=0.0, lt=1.0)
    mosaic_max: float = Field(default=0.7, gt=0.0, lt=1.0)
    mosaic_min_area: float = Field(
        default=0.25,
        ge=0.0,
        le=1.0,
        description="Boxes keeping less than this visible area fraction are dropped",
    )

    @model_validator(mode="after")
    def _check_mosaic_range(self) -> "AugmentConfig":
        if self.mosaic_min > self.mosaic_max:
            raise ValueError("mosaic_min must not exceed mosaic_max")
        return self

    @property
    def is_identity(self) -> bool:
        return not any(
            (self.flip_prob, self.crop_prob, self.jitter_prob, self.blur_prob, self.affine_prob)
        )

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """Every transform disabled."""
        return cls(flip_prob=0.0, crop_prob=0.0, jitter_prob=0.0, blur_prob=0.0, affine_prob=0.0)


class TrainConfig(BaseModel):
    """Toy-scale training configuration."""

    network: str = Field(default="toy", description="cfg path or bundled name")
    epochs: int = Field(default=100, ge=1)
    base_lr: float = Field(default=1e-2, gt=0.0)
    lr_step_every: int = Field(default=200, ge=1)
    lr_decay: float = Field(default=0.1, gt=0.0, le=1.0)
    batch_size: int = Field(default=4, ge=1)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    grad_clip: Optional[float] = Field(default=10.0, gt=0.0)
    seed: int = 0
    mosaic: bool = False
    freeze: FreezeMode = FreezeMode.NONE
    freeze_ranges: Optional[List[Tuple[int, int]]] = Field(
        default=None, description="Explicit inclusive layer ranges overriding the bundled table"
    )
    init: InitMode = InitMode.SCRATCH
    weights_path: Optional[str] = None
    sparsity: SparsityConfig = Field(default_factory=SparsityConfig)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    augment: AugmentConfig = Field(default_factory=AugmentConfig.identity)
    ignore_iou: float = Field(default=0.7, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_init(self) -> "TrainConfig":
        if self.init is InitMode.WEIGHTS and not self.weights_path:
            raise ValueError("init=weights requires weights_path")
        for start, end in self.freeze_ranges or []:
            if start < 0 or end < start:
                raise ValueError(f"Invalid freeze range [{start}, {end}]")
        return self

    @classmethod
    def scheme(cls, number: int, mosaic: bool = False, **overrides) -> "TrainConfig":
        """Configuration skeleton of the six training schemes.

        1 scratch, 2 pretrained, 3 pretrained with frozen backbone,
        4 pretrained with frozen backbone and neck, 5 tiny variant,
        6 sparsity training ahead of pruning and fine-tuning.
        """
        presets = {
            1: dict(network="yolov4", init=InitMode.SCRATCH),
            2: dict(network="yolov4", init=InitMode.WEIGHTS),
            3: dict(network="yolov4", init=InitMode.WEIGHTS, freeze=FreezeMode.BACKBONE),
            4: dict(network="yolov4", init=InitMode.WEIGHTS, freeze=FreezeMode.BACKBONE_NECK),
            5: dict(network="yolov4-tiny", init=InitMode.WEIGHTS),
            6: dict(
                network="yolov4", init=InitMode.WEIGHTS, sparsity=SparsityConfig(lam=1e-4)
            ),
        }
        if number not in presets:
            raise ValueError(f"Unknown scheme {number}; expected 1-6")
        values = {**presets[number], "mosaic": mosaic}
        if values.get("init") is InitMode.WEIGHTS and "weights_path" not in overrides:
            values["weights_path"] = f"{values['network']}.weights"
        values.update(overrides)
        return cls(**values)
