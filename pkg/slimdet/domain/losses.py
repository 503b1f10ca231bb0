"""
Detection losses: CIoU box regression, object / no-object confidence and
classification (binary cross-entropy), target assignment, and the L1
sparsity penalty on batch-norm gamma.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .configs import LossWeights
from .entities import Box, GroundTruth, LossBreakdown, NetworkDef, WeightStore, YoloLayer
from .errors import DegenerateGt
from .graph import infer_shapes
from .nnops import sigmoid

BCE_EPS = 1e-7
_V_SCALE = 4.0 / math.pi ** 2


@dataclass(frozen=True)
class CiouTerms:
    iou: float
    rho2: float
    c2: float
    v: float
    alpha: float
    loss: float
    grad: Tuple[float, float, float, float]


def ciou_arrays(pred: np.ndarray, gt: np.ndarray) -> Dict[str, np.ndarray]:
    """Vectorized CIoU over (N, 4) center-format boxes.

    Returns every term plus `grad`, the (N, 4) derivative of the loss with
    respect to the predicted (cx, cy, w, h), holding alpha constant.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
        bad = gt[np.argmax((gt[:, 2] <= 0) | (gt[:, 3] <= 0))]
        raise DegenerateGt(float(bad[2]), float(bad[3]))

    x, y, w, h = pred.T
    gx, gy, gw, gh = gt.T
    px1, px2, py1, py2 = x - w / 2, x + w / 2, y - h / 2, y + h / 2
    gx1, gx2, gy1, gy2 = gx - gw / 2, gx + gw / 2, gy - gh / 2, gy + gh / 2

    # Intersection and its derivatives (selection indicators pick the pred edge).
    iw_raw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih_raw = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    ovx, ovy = iw_raw > 0, ih_raw > 0
    iw, ih = np.where(ovx, iw_raw, 0.0), np.where(ovy, ih_raw, 0.0)
    ax2, ax1 = (px2 < gx2).astype(float), (px1 > gx1).astype(float)
    ay2, ay1 = (py2 < gy2).astype(float), (py1 > gy1).astype(float)
    diw_dx, diw_dw = ovx * (ax2 - ax1), ovx * 0.5 * (ax2 + ax1)
    dih_dy, dih_dh = ovy * (ay2 - ay1), ovy * 0.5 * (ay2 + ay1)

    inter = iw * ih
    union = w * h + gw * gh - inter
    safe_union = np.where(union > 0, union, 1.0)
    iou = np.where(union > 0, inter / safe_union, 0.0)
    d_inter = np.stack([ih * diw_dx, iw * dih_dy, ih * diw_dw, iw * dih_dh], axis=1)
    d_area = np.stack([np.zeros_like(w), np.zeros_like(w), h, w], axis=1)
    d_union = d_area - d_inter
    d_iou = (d_inter * union[:, None] - inter[:, None] * d_union) / safe_union[:, None] ** 2

    # Normalized center distance over the enclosing-box diagonal.
    rho2 = (x - gx) ** 2 + (y - gy) ** 2
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    c2 = cw ** 2 + ch ** 2
    bx2, bx1 = (px2 > gx2).astype(float), (px1 < gx1).astype(float)
    by2, by1 = (py2 > gy2).astype(float), (py1 < gy1).astype(float)
    d_c2 = np.stack(
        [2 * cw * (bx2 - bx1), 2 * ch * (by2 - by1), cw * (bx2 + bx1), ch * (by2 + by1)], axis=1
    )
    d_rho2 = np.stack([2 * (x - gx), 2 * (y - gy), np.zeros_like(x), np.zeros_like(x)], axis=1)
    d_dist = (d_rho2 * c2[:, None] - rho2[:, None] * d_c2) / c2[:, None] ** 2

    # Aspect consistency; alpha is a constant weight.
    delta = np.arctan2(gw, gh) - np.arctan2(w, h)
    v = _V_SCALE * delta ** 2
    denom = (1.0 - iou) + v
    alpha = np.where(v > 0, v / np.where(denom > 0, denom, 1.0), 0.0)
    norm = w ** 2 + h ** 2
    safe_norm = np.where(norm > 0, norm, 1.0)
    d_v = np.stack(
        [
            np.zeros_like(w),
            np.zeros_like(w),
            np.where(norm > 0, -2 * _V_SCALE * delta * h / safe_norm, 0.0),
            np.where(norm > 0, 2 * _V_SCALE * delta * w / safe_norm, 0.0),
        ],
        axis=1,
    )

    loss = 1.0 - iou + rho2 / c2 + alpha * v
    grad = -d_iou + d_dist + alpha[:, None] * d_v
    return {"iou": iou, "rho2": rho2, "c2": c2, "v": v, "alpha": alpha, "loss": loss, "grad": grad}


def ciou_loss(pred: Box, gt: Box) -> CiouTerms:
    """CIoU = 1 - IoU + rho^2/c^2 + alpha*v for one box pair."""
    t = ciou_arrays(pred.as_array(), gt.as_array())
    return CiouTerms(
        iou=float(t["iou"][0]),
        rho2=float(t["rho2"][0]),
        c2=float(t["c2"][0]),
        v=float(t["v"][0]),
        alpha=float(t["alpha"][0]),
        loss=float(t["loss"][0]),
        grad=tuple(float(g) for g in t["grad"][0]),
    )


# Confidence and classification


@dataclass
class LossInputs:
    """Masks, predictions and targets of one head, laid out (anchor, row, column[, class])."""

    obj_mask: np.ndarray
    noobj_mask: np.ndarray
    pred_conf: np.ndarray
    target_conf: np.ndarray
    pred_class: np.ndarray
    target_class: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.obj_mask & self.noobj_mask):
            raise ValueError("obj and noobj masks overlap")
        if not np.array_equal(self.target_conf == 1, self.obj_mask):
            raise ValueError("target confidence must be 1 exactly on obj slots")

    @property
    def boxes_per_cell(self) -> int:
        return int(self.obj_mask.shape[0])

    @property
    def grid_cells(self) -> int:
        return int(self.obj_mask.shape[1] * self.obj_mask.shape[2])


def _bce(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))


def bce_logit_grad(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d BCE / d logit for p = sigmoid(logit); zero where the clamp is active."""
    active = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    return np.where(active, p - t, 0.0)


def obj_conf_loss(inputs: LossInputs) -> float:
    return float(np.sum(_bce(inputs.pred_conf, inputs.target_conf)[inputs.obj_mask]))


def noobj_conf_loss(inputs: LossInputs) -> float:
    return float(np.sum(_bce(inputs.pred_conf, inputs.target_conf)[inputs.noobj_mask]))


def class_loss(inputs: LossInputs) -> float:
    return float(np.sum(_bce(inputs.pred_class, inputs.target_class)[inputs.obj_mask]))


# Target assignment


@dataclass(frozen=True)
class HeadGeometry:
    anchors: Tuple[Tuple[float, float], ...]
    grid_h: int
    grid_w: int
    classes: int
    scale_xy: float = 1.0


@dataclass
class HeadTargets:
    geometry: HeadGeometry
    obj_mask: np.ndarray
    noobj_mask: np.ndarray
    target_conf: np.ndarray
    target_class: np.ndarray
    boxes: Dict[Tuple[int, int, int], Box] = field(default_factory=dict)

    def slots(self) -> List[Tuple[int, int, int]]:
        return sorted(self.boxes)

    def to_inputs(self, pred_conf: np.ndarray, pred_class: np.ndarray) -> LossInputs:
        return LossInputs(
            obj_mask=self.obj_mask,
            noobj_mask=self.noobj_mask,
            pred_conf=pred_conf,
            target_conf=self.target_conf,
            pred_class=pred_class,
            target_class=self.target_class,
        )


def head_geometries(net: NetworkDef) -> Dict[int, HeadGeometry]:
    shapes = infer_shapes(net)
    heads = {}
    for i in net.yolo_indices():
        layer: YoloLayer = net.layers[i]
        shape = shapes[i]
        heads[i] = HeadGeometry(
            anchors=layer.masked_anchors,
            grid_h=shape.height,
            grid_w=shape.width,
            classes=layer.classes,
            scale_xy=layer.scale_xy,
        )
    return heads


def shape_iou(w: float, h: float, anchors: Sequence[Tuple[float, float]]) -> np.ndarray:
    """IoU of a w x h box against each anchor with centers aligned (pixels)."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(w, a[:, 0]) * np.minimum(h, a[:, 1])
    return inter / (w * h + a[:, 0] * a[:, 1] - inter)


def center_cell(box: Box, grid_w: int, grid_h: int) -> Tuple[int, int]:
    """(row, column) of the cell containing the box center."""
    col = min(max(int(box.cx * grid_w), 0), grid_w - 1)
    row = min(max(int(box.cy * grid_h), 0), grid_h - 1)
    return row, col


def assign_targets(
    gts: Sequence[GroundTruth],
    head: HeadGeometry,
    net_size: Tuple[int, int],
    ignore_iou: float = 0.7,
) -> HeadTargets:
    """Responsibility masks for one head.

    Each GT takes the slot at its center cell with the best shape-IoU anchor
    (ties to the lower anchor). When an earlier GT already holds that slot the
    GT falls back to the next-best free anchor of the cell; only when every
    anchor there is taken does it overwrite its best slot. Anchors at a GT's
    center cell whose shape-IoU exceeds `ignore_iou` leave the no-object mask;
    every other unassigned slot is in it.
    """
    b, gh, gw = len(head.anchors), head.grid_h, head.grid_w
    obj = np.zeros((b, gh, gw), dtype=bool)
    ignore = np.zeros((b, gh, gw), dtype=bool)
    target_class = np.zeros((b, gh, gw, head.classes), dtype=np.float64)
    boxes: Dict[Tuple[int, int, int], Box] = {}
    net_w, net_h = net_size

    for gt in gts:
        if gt.box.w <= 0 or gt.box.h <= 0:
            raise DegenerateGt(gt.box.w, gt.box.h)
        row, col = center_cell(gt.box, gw, gh)
        ious = shape_iou(gt.box.w * net_w, gt.box.h * net_h, head.anchors)
        ranked = [int(a) for a in np.argsort(-ious, kind="stable")]
        free = [a for a in ranked if (a, row, col) not in boxes]
        anchor = free[0] if free else ranked[0]
        obj[anchor, row, col] = True
        target_class[anchor, row, col] = 0.0
        target_class[anchor, row, col, gt.class_id] = 1.0
        boxes[(anchor, row, col)] = gt.box
        ignore[ious > ignore_iou, row, col] = True

    noobj = ~obj & ~ignore
    return HeadTargets(
        geometry=head,
        obj_mask=obj,
        noobj_mask=noobj,
        target_conf=obj.astype(np.float64),
        target_class=target_class,
        boxes=boxes,
    )


# Per-head loss with gradient w.r.t. the raw feature map


def head_loss(
    feature: np.ndarray,
    targets: HeadTargets,
    net_size: Tuple[int, int],
    weights: Optional[LossWeights] = None,
) -> Tuple[LossBreakdown, np.ndarray]:
    """Loss terms of one head and d(weighted sum)/d(feature)."""
    weights = weights or LossWeights()
    geo = targets.geometry
    b, c = len(geo.anchors), geo.classes
    f = feature.astype(np.float64).reshape(b, c + 5, geo.grid_h, geo.grid_w)
    grad = np.zeros_like(f)

    p_conf = sigmoid(f[:, 4])
    p_class = np.transpose(sigmoid(f[:, 5:]), (0, 2, 3, 1))
    inputs = targets.to_inputs(p_conf, p_class)
    obj = obj_conf_loss(inputs)
    noobj = noobj_conf_loss(inputs)
    cls = class_loss(inputs)

    g_conf = bce_logit_grad(p_conf, targets.target_conf)
    grad[:, 4] = (
        weights.obj * np.where(targets.obj_mask, g_conf, 0.0)
        + weights.noobj * np.where(targets.noobj_mask, g_conf, 0.0)
    )
    g_class = bce_logit_grad(p_class, targets.target_class) * targets.obj_mask[..., None]
    grad[:, 5:] = weights.cls * np.transpose(g_class, (0, 3, 1, 2))

    ciou_total = 0.0
    slots = targets.slots()
    if slots:
        a_idx, rows, cols = (np.array(v) for v in zip(*slots))
        t = f[a_idx, :4, rows, cols]
        sx, sy = sigmoid(t[:, 0]), sigmoid(t[:, 1])
        anchors = np.asarray(geo.anchors, dtype=np.float64)[a_idx]
        s = geo.scale_xy
        net_w, net_h = net_size
        pred = np.stack(
            [
                (sx * s - (s - 1) / 2 + cols) / geo.grid_w,
                (sy * s - (s - 1) / 2 + rows) / geo.grid_h,
                anchors[:, 0] * np.exp(np.minimum(t[:, 2], 20.0)) / net_w,
                anchors[:, 1] * np.exp(np.minimum(t[:, 3], 20.0)) / net_h,
            ],
            axis=1,
        )
        gt = np.array([targets.boxes[slot].as_array() for slot in slots])
        terms = ciou_arrays(pred, gt)
        ciou_total = float(np.sum(terms["loss"]))
        d_box = terms["grad"]
        chain = np.stack(
            [
                s * sx * (1 - sx) / geo.grid_w,
                s * sy * (1 - sy) / geo.grid_h,
                np.where(t[:, 2] < 20.0, pred[:, 2], 0.0),
                np.where(t[:, 3] < 20.0, pred[:, 3], 0.0),
            ],
            axis=1,
        )
        grad[a_idx, :4, rows, cols] += weights.ciou * d_box * chain

    breakdown = LossBreakdown(
        ciou=weights.ciou * ciou_total,
        obj=weights.obj * obj,
        noobj=weights.noobj * noobj,
        cls=weights.cls * cls,
    )
    return breakdown, grad.reshape(feature.shape).astype(feature.dtype)


def sparsity_penalty(
    store: WeightStore, layers: Iterable[int], lam: float
) -> Tuple[float, Dict[int, np.ndarray]]:
    """lam * sum |gamma| over `layers` and its subgradient lam * sign(gamma)."""
    value = 0.0
    grads: Dict[int, np.ndarray] = {}
    if lam <= 0.0:
        return value, grads
    for i in layers:
        gamma = store.blocks[i].bn_gamma
        if gamma is None:
            continue
        value += lam * float(np.sum(np.abs(gamma.astype(np.float64))))
        grads[i] = (lam * np.sign(gamma)).astype(gamma.dtype)
    return value, grads


def total_loss(
    batch_heads: Sequence[Dict[int, np.ndarray]],
    batch_gts: Sequence[Sequence[GroundTruth]],
    net: NetworkDef,
    weights: Optional[LossWeights] = None,
    ignore_iou: float = 0.7,
    store: Optional[WeightStore] = None,
    sparsity_layers: Iterable[int] = (),
    lam: float = 0.0,
) -> Tuple[LossBreakdown, List[Dict[int, np.ndarray]], Dict[int, np.ndarray]]:
    """Batch-mean detection loss plus the sparsity term.

    Returns the breakdown, per-image head gradients (already divided by the
    batch size) and the gamma subgradients of the sparsity term.
    """
    if len(batch_heads) != len(batch_gts):
        raise ValueError("Batch heads and ground truths differ in length")
    geometries = head_geometries(net)
    net_size = (net.input_width, net.input_height)
    n = max(len(batch_heads), 1)
    total = LossBreakdown()
    head_grads: List[Dict[int, np.ndarray]] = []
    for heads, gts in zip(batch_heads, batch_gts):
        image_grads = {}
        for index, feature in heads.items():
            targets = assign_targets(gts, geometries[index], net_size, ignore_iou)
            terms, g = head_loss(feature, targets, net_size, weights)
            total = total + terms
            image_grads[index] = g / n
        head_grads.append(image_grads)
    total = total.scaled(1.0 / n)

    gamma_grads: Dict[int, np.ndarray] = {}
    if store is not None and lam > 0.0:
        penalty, gamma_grads = sparsity_penalty(store, sparsity_layers, lam)
        total = total + LossBreakdown(sparsity=penalty)
    return total, head_grads, gamma_grads

