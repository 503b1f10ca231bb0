"""
Detection evaluation: greedy matching, per-class average precision, mAP
and the FPS benchmark harness.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .detect import iou_matrix
from .entities import ClassStats, Detection, EvalResult, FpsReport, GroundTruth, SweepRow

MIN_TIMED_IMAGES = 10


def _by_confidence(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: -d.confidence)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> List[bool]:
    """TP/FP flag per detection, in descending-confidence order.

    Each detection takes the highest-IoU unmatched same-class GT with
    IoU >= iou_thresh; each GT is matched at most once.
    """
    ranked = _by_confidence(dets)
    if not ranked:
        return []
    if not gts:
        return [False] * len(ranked)
    ious = iou_matrix(
        np.array([d.box.as_array() for d in ranked]), np.array([g.box.as_array() for g in gts])
    )
    gt_class = np.array([g.class_id for g in gts])
    matched = np.zeros(len(gts), dtype=bool)
    flags = []
    for k, det in enumerate(ranked):
        candidates = np.where((gt_class == det.class_id) & ~matched, ious[k], -1.0)
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_thresh:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall(flags: Sequence[bool], n_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return precision, recall


def average_precision(flags: Sequence[bool], n_gt: int, interp: str = "all") -> Optional[float]:
    """Area under the max-interpolated precision envelope; None when n_gt == 0.

    `interp="voc11"` averages the envelope at recall 0, 0.1, ..., 1 instead.
    """
    if n_gt <= 0:
        return None
    if len(flags) == 0:
        return 0.0
    precision, recall = precision_recall(flags, n_gt)
    if interp == "voc11":
        points = []
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t - 1e-12]
            points.append(float(above.max()) if above.size else 0.0)
        return float(np.mean(points))

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map50(
    dets_by_image: Dict[str, Sequence[Detection]],
    gts_by_image: Dict[str, Sequence[GroundTruth]],
    classes: int,
    iou_thresh: float = 0.5,
    conf_thresh: float = 0.0,
    interp: str = "all",
    threads: int = 1,
) -> EvalResult:
    """Per-class AP over detections pooled across images, and their mean."""
    image_ids = sorted(set(dets_by_image) | set(gts_by_image))

    def evaluate(image_id: str) -> List[Tuple[float, int, bool]]:
        dets = [d for d in dets_by_image.get(image_id, ()) if d.confidence >= conf_thresh]
        ranked = _by_confidence(dets)
        flags = match_detections(ranked, gts_by_image.get(image_id, ()), iou_thresh)
        return [(d.confidence, d.class_id, f) for d, f in zip(ranked, flags)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_image = list(pool.map(evaluate, image_ids))
    else:
        per_image = [evaluate(i) for i in image_ids]

    pooled = [record for records in per_image for record in records]
    pooled.sort(key=lambda r: -r[0])
    n_gt = np.zeros(classes, dtype=int)
    for image_id in image_ids:
        for gt in gts_by_image.get(image_id, ()):
            if gt.class_id < classes:
                n_gt[gt.class_id] += 1

    stats = []
    for c in range(classes):
        flags = [f for _, cls, f in pooled if cls == c]
        tp = int(sum(flags))
        ap = average_precision(flags, int(n_gt[c]), interp)
        if ap is None:
            logger.warning(f"Class {c} has no ground truth; excluded from mAP")
        stats.append(
            ClassStats(
                class_id=c,
                ap=ap,
                tp=tp,
                fp=len(flags) - tp,
                fn=int(n_gt[c]) - tp,
                n_gt=int(n_gt[c]),
            )
        )
    defined = [s.ap for s in stats if s.ap is not None]
    mean_ap = float(np.mean(defined)) if defined else 0.0
    return EvalResult(
        per_class=tuple(stats), map=mean_ap, iou_thresh=iou_thresh, conf_thresh=conf_thresh
    )


def benchmark_fps(
    pipeline: Callable[[np.ndarray], Sequence[Detection]],
    images: Sequence[np.ndarray],
    warmup: int = 10,
    clock: Callable[[], float] = time.perf_counter,
) -> FpsReport:
    """Time `pipeline` per image, serially, after `warmup` untimed runs.

    Images are expected decoded in memory; decode time is never measured.
    """
    if len(images) < warmup + MIN_TIMED_IMAGES:
        raise ValueError(
            f"Need at least {warmup + MIN_TIMED_IMAGES} images ({warmup} warmup + "
            f"{MIN_TIMED_IMAGES} timed) for the benchmark, got {len(images)}"
        )
    for image in images[:warmup]:
        pipeline(image)
    timed = images[warmup:]
    latencies = []
    counts = []
    for image in timed:
        start = clock()
        dets = pipeline(image)
        latencies.append(clock() - start)
        counts.append(len(dets))
    wall = float(sum(latencies))
    wall = wall if wall > 0 else float(np.finfo(np.float64).tiny)
    report = FpsReport(
        image_count=len(timed),
        warmup_count=warmup,
        wall_time=wall,
        fps=len(timed) / wall,
        latencies=tuple(latencies),
        p50=float(np.percentile(latencies, 50)),
        p95=float(np.percentile(latencies, 95)),
        detections_per_image=tuple(counts),
    )
    logger.info(
        f"Benchmark: {report.image_count} images in {wall:.3f}s -> {report.fps:.2f} FPS "
        f"(p50 {report.p50 * 1000:.1f} ms, p95 {report.p95 * 1000:.1f} ms)"
    )
    return report


def annotate_sweep(
    rows: Sequence[SweepRow], map_tolerance: float = 0.02, excess_factor: float = 2.0
) -> List[SweepRow]:
    """Mark the best-mAP row, the most efficient row and rows flooding boxes.

    The most efficient row is the fastest pruned row (ratio > 0) whose mAP is
    within `map_tolerance` of the best pruned mAP. A row has excess boxes
    when its mean detection count exceeds `excess_factor` times the count of
    the lowest-ratio row.
    """
    if not rows:
        return []
    best = max(range(len(rows)), key=lambda k: (rows[k].map, -k))
    pruned = [k for k, r in enumerate(rows) if r.ratio > 0]
    efficient = None
    if pruned:
        top = max(rows[k].map for k in pruned)
        close = [k for k in pruned if rows[k].map >= top - map_tolerance]
        efficient = max(close, key=lambda k: (rows[k].fps, -k))
    base = min(rows, key=lambda r: r.ratio).mean_detections
    return [
        replace(
            row,
            best_map=k == best,
            most_efficient=k == efficient,
            excess_boxes=base > 0 and row.mean_detections > excess_factor * base,
        )
        for k, row in enumerate(rows)
    ]
