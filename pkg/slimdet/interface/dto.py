"""
Data Transfer Objects (DTOs) for machine-readable CLI output.
"""
from typing import List, Optional

from pydantic import BaseModel, Field

from ..domain.entities import (
    ClassStats,
    Detection,
    EpochRecord,
    EvalResult,
    FpsReport,
    PruneReport,
    SweepRow,
)


class DetectionDTO(BaseModel):
    """DTO for one detection record."""

    image_id: str = Field(..., description="Image path or identifier")
    class_id: int = Field(..., ge=0, description="Class index")
    confidence: float = Field(..., ge=0.0, le=1.0, description="Objectness times class score")
    cx: float = Field(..., description="Normalized box center x")
    cy: float = Field(..., description="Normalized box center y")
    w: float = Field(..., description="Normalized box width")
    h: float = Field(..., description="Normalized box height")

    @classmethod
    def from_detection(cls, image_id: str, det: Detection) -> "DetectionDTO":
        return cls(
            image_id=image_id,
            class_id=det.class_id,
            confidence=det.confidence,
            cx=det.box.cx,
            cy=det.box.cy,
            w=det.box.w,
            h=det.box.h,
        )

    def to_line(self) -> str:
        return (
            f"{self.image_id} {self.class_id} {self.confidence:.6f} "
            f"{self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"
        )


class EpochRecordDTO(BaseModel):
    """DTO for one epoch of training history."""

    epoch: int
    lr: float
    ciou: float
    obj: float
    noobj: float
    cls: float = Field(..., description="Classification loss")
    sparsity: float
    total: float
    gamma_sparsity: float = Field(..., description="Fraction of |gamma| below 0.01")

    @classmethod
    def from_record(cls, record: EpochRecord) -> "EpochRecordDTO":
        loss = record.loss
        return cls(
            epoch=record.epoch,
            lr=record.lr,
            ciou=loss.ciou,
            obj=loss.obj,
            noobj=loss.noobj,
            cls=loss.cls,
            sparsity=loss.sparsity,
            total=loss.total,
            gamma_sparsity=record.gamma_sparsity,
        )


class ClassStatsDTO(BaseModel):
    class_id: int
    name: str
    ap: Optional[float] = Field(None, description="None when the class has no ground truth")
    tp: int
    fp: int
    fn: int
    n_gt: int

    @classmethod
    def from_stats(cls, stats: ClassStats, name: str) -> "ClassStatsDTO":
        return cls(
            class_id=stats.class_id,
            name=name,
            ap=stats.ap,
            tp=stats.tp,
            fp=stats.fp,
            fn=stats.fn,
            n_gt=stats.n_gt,
        )


class EvalResultDTO(BaseModel):
    """DTO for an evaluation run."""

    map: float = Field(..., description="Mean AP over classes with ground truth")
    iou_thresh: float
    conf_thresh: float
    per_class: List[ClassStatsDTO]

    @classmethod
    def from_result(cls, result: EvalResult, names: List[str]) -> "EvalResultDTO":
        return cls(
            map=result.map,
            iou_thresh=result.iou_thresh,
            conf_thresh=result.conf_thresh,
            per_class=[
                ClassStatsDTO.from_stats(
                    s, names[s.class_id] if s.class_id < len(names) else str(s.class_id)
                )
                for s in result.per_class
            ],
        )


class FpsReportDTO(BaseModel):
    """DTO for a benchmark run; latencies in seconds."""

    image_count: int
    warmup_count: int
    wall_time: float
    fps: float
    p50: float
    p95: float
    mean_detections: float

    @classmethod
    def from_report(cls, report: FpsReport) -> "FpsReportDTO":
        return cls(
            image_count=report.image_count,
            warmup_count=report.warmup_count,
            wall_time=report.wall_time,
            fps=report.fps,
            p50=report.p50,
            p95=report.p95,
            mean_detections=report.mean_detections,
        )


class PruneReportDTO(BaseModel):
    params_before: int
    params_after: int
    param_fraction: float
    ratio_requested: float
    ratio_achieved: float

    @classmethod
    def from_report(cls, report: PruneReport) -> "PruneReportDTO":
        return cls(
            params_before=report.params_before,
            params_after=report.params_after,
            param_fraction=report.param_fraction,
            ratio_requested=report.ratio_requested,
            ratio_achieved=report.ratio_achieved,
        )


class SweepRowDTO(BaseModel):
    ratio: float
    params: int
    map: float
    fps: float
    mean_detections: float
    best_map: bool
    most_efficient: bool
    excess_boxes: bool

    @classmethod
    def from_row(cls, row: SweepRow) -> "SweepRowDTO":
        return cls(
            ratio=row.ratio,
            params=row.params,
            map=row.map,
            fps=row.fps,
            mean_detections=row.mean_detections,
            best_map=row.best_map,
            most_efficient=row.most_efficient,
            excess_boxes=row.excess_boxes,
        )
