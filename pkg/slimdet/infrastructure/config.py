"""
Configuration management for the slimdet toolkit.
"""
from typing import Literal, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables (prefix SLIMDET_)."""

    model_config = SettingsConfigDict(
        env_prefix="SLIMDET_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application settings
    app_name: str = Field(default="slimdet")
    app_version: str = Field(default="0.1.0")

    # Execution
    threads: int = Field(default=1, ge=1)
    seed: int = Field(default=0)
    conv_method: Literal["reference", "gemm"] = Field(default="reference")

    # Detection
    conf_thresh: float = Field(default=0.25, ge=0.0, le=1.0)
    iou_thresh: float = Field(default=0.45, ge=0.0, le=1.0)

    # Evaluation
    map_iou_thresh: float = Field(default=0.5, ge=0.0, le=1.0)
    eval_conf_thresh: float = Field(default=0.005, ge=0.0, le=1.0)
    ap_interp: Literal["all", "voc11"] = Field(default="all")
    bench_warmup: int = Field(default=10, ge=0)
    bench_images: int = Field(default=20, ge=10)

    # Losses
    sparsity_lambda: float = Field(default=1e-4, ge=0.0)
    ignore_iou: float = Field(default=0.7, ge=0.0, le=1.0)

    # Augmentation
    mosaic_min: float = Field(default=0.3, gt=0.0, lt=1.0)
    mosaic_max: float = Field(default=0.7, gt=0.0, lt=1.0)
    mosaic_min_area: float = Field(default=0.25, ge=0.0, le=1.0)

    # Pruning
    prune_floor: int = Field(default=1, ge=1)
    prune_floor_fraction: float = Field(default=0.05, ge=0.0, le=1.0)
    beta_warn: float = Field(default=1e-3, ge=0.0)
    efficiency_map_tolerance: float = Field(default=0.02, ge=0.0)

    # Logging settings
    log_level: str = Field(default="INFO")
    log_file: Optional[str] = Field(default=None)
    log_format: str = Field(
        default=(
            "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
            "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - "
            "<level>{message}</level>"
        ),
    )


# Global settings instance
settings = Settings()
