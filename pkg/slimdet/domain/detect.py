"""
Box geometry, yolo head decoding and per-class non-maximum suppression.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .entities import Box, Detection, YoloLayer
from .errors import ChannelMismatch
from .nnops import sigmoid

# exp(tw) is clamped so a wild logit cannot overflow float32.
MAX_LOG_SCALE = 20.0


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of center-format boxes a (N,4) and b (M,4) -> (N,M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a1, a2 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b1, b2 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a2, b2) - np.maximum(a1, b1), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, None, 2] * a[:, None, 3]) + (b[None, :, 2] * b[None, :, 3]) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass(frozen=True)
class HeadPrediction:
    """Decoded head in array form; slot order is (row, column, anchor)."""

    boxes: np.ndarray
    objectness: np.ndarray
    class_scores: np.ndarray

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


def decode_head_arrays(
    feature: np.ndarray,
    anchors: Sequence[Tuple[float, float]],
    net_size: Tuple[int, int],
    scale_xy: float,
    classes: int,
) -> HeadPrediction:
    """Decode a (channels, H, W) head into normalized boxes and scores."""
    if feature.ndim != 3:
        raise ValueError(f"Expected a (c,h,w) feature, got shape {feature.shape}")
    n_anchors = len(anchors)
    expected = (classes + 5) * n_anchors
    if feature.shape[0] != expected:
        raise ChannelMismatch(expected, feature.shape[0])
    _, h, w = feature.shape
    net_w, net_h = net_size
    f = feature.astype(np.float64).reshape(n_anchors, classes + 5, h, w)
    f = np.transpose(f, (2, 3, 0, 1))  # h, w, anchor, field

    cols = np.arange(w, dtype=np.float64).reshape(1, w, 1)
    rows = np.arange(h, dtype=np.float64).reshape(h, 1, 1)
    shift = (scale_xy - 1.0) / 2.0
    cx = (sigmoid(f[..., 0]) * scale_xy - shift + cols) / w
    cy = (sigmoid(f[..., 1]) * scale_xy - shift + rows) / h
    aw = np.array([a[0] for a in anchors], dtype=np.float64)
    ah = np.array([a[1] for a in anchors], dtype=np.float64)
    bw = aw * np.exp(np.minimum(f[..., 2], MAX_LOG_SCALE)) / net_w
    bh = ah * np.exp(np.minimum(f[..., 3], MAX_LOG_SCALE)) / net_h

    boxes = np.stack([cx, cy, bw, bh], axis=-1).reshape(-1, 4)
    objectness = sigmoid(f[..., 4]).reshape(-1)
    class_scores = sigmoid(f[..., 5:]).reshape(-1, classes)
    return HeadPrediction(boxes=boxes, objectness=objectness, class_scores=class_scores)


def decode_yolo_head(
    feature: np.ndarray,
    anchors: Sequence[Tuple[float, float]],
    mask: Sequence[int],
    net_size: Tuple[int, int],
    scale_xy: float,
    classes: int,
    conf_thresh: Optional[float] = None,
) -> List[Detection]:
    """One raw detection per (cell, anchor) slot, labelled with its best class.

    `anchors` is the full anchor list and `mask` selects this head's anchors.
    With `conf_thresh` slots scoring below it are skipped.
    """
    pred = decode_head_arrays(
        feature, [anchors[m] for m in mask], net_size, scale_xy, classes
    )
    best = np.argmax(pred.class_scores, axis=1)
    confidence = pred.objectness * pred.class_scores[np.arange(len(pred)), best]
    keep = np.arange(len(pred))
    if conf_thresh is not None:
        keep = np.flatnonzero(confidence >= conf_thresh)
    return [
        Detection(
            box=Box(*(float(v) for v in pred.boxes[k])),
            class_id=int(best[k]),
            confidence=float(np.clip(confidence[k], 0.0, 1.0)),
        )
        for k in keep
    ]


def decode_layer(
    feature: np.ndarray,
    layer: YoloLayer,
    net_size: Tuple[int, int],
    conf_thresh: Optional[float] = None,
) -> List[Detection]:
    return decode_yolo_head(
        feature, layer.anchors, layer.mask, net_size, layer.scale_xy, layer.classes, conf_thresh
    )


def nms(dets: Sequence[Detection], conf_thresh: float, iou_thresh: float) -> List[Detection]:
    """Greedy per-class suppression in descending confidence order.

    Equal confidences keep their input order.
    """
    candidates = [d for d in dets if d.confidence >= conf_thresh]
    order = sorted(range(len(candidates)), key=lambda k: -candidates[k].confidence)
    if not order:
        return []
    ranked = [candidates[k] for k in order]
    boxes = np.array([d.box.as_array() for d in ranked])
    labels = np.array([d.class_id for d in ranked])
    suppressed = np.zeros(len(ranked), dtype=bool)
    kept: List[Detection] = []
    for k in range(len(ranked)):
        if suppressed[k]:
            continue
        kept.append(ranked[k])
        rest = np.flatnonzero(~suppressed[k + 1:] & (labels[k + 1:] == labels[k])) + k + 1
        if rest.size:
            overlaps = iou_matrix(boxes[k], boxes[rest])[0]
            suppressed[rest[overlaps > iou_thresh]] = True
    return kept
