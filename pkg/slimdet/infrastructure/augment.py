"""
Letterboxing and seeded augmentations.

Every transform is a pure function of its inputs and a 64-bit seed. Callers
derive per-sample seeds with `derive_seed(global_seed, sample.source_id)`
so results do not depend on processing order.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from ..domain.configs import AugmentConfig
from ..domain.entities import Box, Detection, GroundTruth, LetterboxInfo, Sample
from ..domain.rng import SplitMix64
from . import images

PAD_VALUE = 0.5


def _corners_px(gts: Sequence[GroundTruth], width: int, height: int) -> np.ndarray:
    if not gts:
        return np.zeros((0, 4), dtype=np.float64)
    corners = np.array([g.box.to_corners() for g in gts], dtype=np.float64)
    return corners * np.array([width, height, width, height], dtype=np.float64)


def _area(corners: np.ndarray) -> np.ndarray:
    return np.maximum(corners[:, 2] - corners[:, 0], 0.0) * np.maximum(
        corners[:, 3] - corners[:, 1], 0.0
    )


def _clip_gts(
    gts: Sequence[GroundTruth],
    corners: np.ndarray,
    bounds: Tuple[float, float, float, float],
    canvas: Tuple[int, int],
    min_fraction: float,
) -> List[GroundTruth]:
    """Clip mapped pixel corners to `bounds`, drop mostly-hidden boxes, normalize to `canvas`."""
    if not gts:
        return []
    x0, y0, x1, y1 = bounds
    clipped = np.column_stack(
        [
            np.clip(corners[:, 0], x0, x1),
            np.clip(corners[:, 1], y0, y1),
            np.clip(corners[:, 2], x0, x1),
            np.clip(corners[:, 3], y0, y1),
        ]
    )
    full = _area(corners)
    visible = _area(clipped)
    width, height = canvas
    norm = np.clip(clipped / np.array([width, height, width, height], dtype=np.float64), 0.0, 1.0)
    kept = []
    for gt, row, a_full, a_vis in zip(gts, norm, full, visible):
        if a_vis <= 0.0 or a_vis < min_fraction * a_full:
            continue
        kept.append(GroundTruth(gt.class_id, Box.from_corners(*row)))
    return kept


# Letterbox


def letterbox_info(width: int, height: int, net_width: int, net_height: int) -> LetterboxInfo:
    if min(width, height, net_width, net_height) <= 0:
        raise ValueError("Letterbox dimensions must be positive")
    scale = min(net_width / width, net_height / height)
    new_w = min(net_width, max(1, int(round(width * scale))))
    new_h = min(net_height, max(1, int(round(height * scale))))
    return LetterboxInfo(
        orig_width=width,
        orig_height=height,
        net_width=net_width,
        net_height=net_height,
        scale=scale,
        new_width=new_w,
        new_height=new_h,
        pad_x=(net_width - new_w) // 2,
        pad_y=(net_height - new_h) // 2,
    )


def letterbox_image(
    image: np.ndarray, net_width: int, net_height: int
) -> Tuple[np.ndarray, LetterboxInfo]:
    """Aspect-preserving resize into a gray-padded net_width x net_height canvas."""
    info = letterbox_info(image.shape[2], image.shape[1], net_width, net_height)
    resized = images.resize(image, info.new_width, info.new_height)
    canvas = np.full((3, net_height, net_width), PAD_VALUE, dtype=np.float32)
    canvas[
        :, info.pad_y : info.pad_y + info.new_height, info.pad_x : info.pad_x + info.new_width
    ] = resized
    return canvas, info


def letterbox_box(box: Box, info: LetterboxInfo) -> Box:
    sx = info.new_width / info.net_width
    sy = info.new_height / info.net_height
    return Box(
        cx=(box.cx * info.new_width + info.pad_x) / info.net_width,
        cy=(box.cy * info.new_height + info.pad_y) / info.net_height,
        w=box.w * sx,
        h=box.h * sy,
    )


def unletterbox_box(box: Box, info: LetterboxInfo) -> Box:
    """Map a box on the network canvas back to the original image frame, clipped to it."""
    x1, y1, x2, y2 = box.to_corners()

    def back_x(x: float) -> float:
        return min(max((x * info.net_width - info.pad_x) / info.new_width, 0.0), 1.0)

    def back_y(y: float) -> float:
        return min(max((y * info.net_height - info.pad_y) / info.new_height, 0.0), 1.0)

    return Box.from_corners(back_x(x1), back_y(y1), back_x(x2), back_y(y2))


def unletterbox_detections(dets: Sequence[Detection], info: LetterboxInfo) -> List[Detection]:
    return [Detection(unletterbox_box(d.box, info), d.class_id, d.confidence) for d in dets]


def letterbox(sample: Sample, net_width: int, net_height: int) -> Sample:
    canvas, info = letterbox_image(sample.image, net_width, net_height)
    gts = [GroundTruth(g.class_id, letterbox_box(g.box, info)) for g in sample.gts]
    return Sample(image=canvas, gts=gts, source_id=sample.source_id, letterbox=info)


# Mosaic


@dataclass(frozen=True)
class MosaicPlacement:
    """Where one input lands: its quadrant on the canvas and the crop of its resized copy."""

    x0: int
    y0: int
    width: int
    height: int
    resized_width: int
    resized_height: int
    offset_x: int
    offset_y: int
    scale_x: float
    scale_y: float


def plan_mosaic(
    sizes: Sequence[Tuple[int, int]],
    seed: int,
    net_width: int,
    net_height: int,
    config: AugmentConfig,
) -> Tuple[Tuple[int, int], List[MosaicPlacement]]:
    """Draw the split point and per-quadrant crops for four (width, height) inputs.

    Quadrants are top-left, top-right, bottom-left, bottom-right. Each
    input is scaled to cover its quadrant, then cropped at a seeded offset.
    """
    if len(sizes) != 4:
        raise ValueError(f"Mosaic needs exactly 4 samples, got {len(sizes)}")
    rng = SplitMix64(seed)
    split_x = int(round(rng.uniform(config.mosaic_min, config.mosaic_max) * net_width))
    split_y = int(round(rng.uniform(config.mosaic_min, config.mosaic_max) * net_height))
    split_x = min(max(split_x, 1), net_width - 1)
    split_y = min(max(split_y, 1), net_height - 1)

    quadrants = [
        (0, 0, split_x, split_y),
        (split_x, 0, net_width - split_x, split_y),
        (0, split_y, split_x, net_height - split_y),
        (split_x, split_y, net_width - split_x, net_height - split_y),
    ]
    placements = []
    for (width, height), (x0, y0, qw, qh) in zip(sizes, quadrants):
        cover = max(qw / width, qh / height)
        rw = max(qw, math.ceil(width * cover - 1e-9))
        rh = max(qh, math.ceil(height * cover - 1e-9))
        placements.append(
            MosaicPlacement(
                x0=x0,
                y0=y0,
                width=qw,
                height=qh,
                resized_width=rw,
                resized_height=rh,
                offset_x=rng.randint(0, rw - qw),
                offset_y=rng.randint(0, rh - qh),
                scale_x=rw / width,
                scale_y=rh / height,
            )
        )
    return (split_x, split_y), placements


def mosaic(
    samples: Sequence[Sample],
    seed: int,
    net_width: int,
    net_height: int,
    config: Optional[AugmentConfig] = None,
) -> Sample:
    """Compose four samples into one net-sized image with remapped labels.

    Boxes are clipped to their quadrant and dropped when less than
    `config.mosaic_min_area` of their remapped area stays visible.
    """
    config = config or AugmentConfig()
    split, placements = plan_mosaic(
        [(s.width, s.height) for s in samples], seed, net_width, net_height, config
    )
    canvas = np.full((3, net_height, net_width), PAD_VALUE, dtype=np.float32)
    gts: List[GroundTruth] = []
    for sample, p in zip(samples, placements):
        resized = images.resize(sample.image, p.resized_width, p.resized_height)
        canvas[:, p.y0 : p.y0 + p.height, p.x0 : p.x0 + p.width] = resized[
            :, p.offset_y : p.offset_y + p.height, p.offset_x : p.offset_x + p.width
        ]
        corners = _corners_px(sample.gts, sample.width, sample.height)
        corners = corners * np.array([p.scale_x, p.scale_y, p.scale_x, p.scale_y])
        corners = corners + np.array(
            [p.x0 - p.offset_x, p.y0 - p.offset_y, p.x0 - p.offset_x, p.y0 - p.offset_y]
        )
        gts += _clip_gts(
            sample.gts,
            corners,
            (p.x0, p.y0, p.x0 + p.width, p.y0 + p.height),
            (net_width, net_height),
            config.mosaic_min_area,
        )
    source = "mosaic(" + "+".join(s.source_id for s in samples) + ")"
    logger.debug(f"Mosaic split {split} -> {len(gts)} boxes for {source}")
    return Sample(image=canvas, gts=gts, source_id=source)


# Photometric and geometric transforms


def _crop(sample_image: np.ndarray, gts, rng: SplitMix64, config: AugmentConfig):
    height, width = sample_image.shape[1:]
    scale = rng.uniform(config.crop_min_scale, 1.0)
    cw = max(1, int(round(width * scale)))
    ch = max(1, int(round(height * scale)))
    x0 = rng.randint(0, width - cw)
    y0 = rng.randint(0, height - ch)
    cropped = np.ascontiguousarray(sample_image[:, y0 : y0 + ch, x0 : x0 + cw])
    corners = _corners_px(gts, width, height) - np.array([x0, y0, x0, y0], dtype=np.float64)
    return cropped, _clip_gts(gts, corners, (0, 0, cw, ch), (cw, ch), config.mosaic_min_area)


def _affine(image: np.ndarray, gts, rng: SplitMix64, config: AugmentConfig):
    height, width = image.shape[1:]
    angle = math.radians(rng.uniform(-config.rotate_deg, config.rotate_deg))
    scale = rng.uniform(1.0 - config.scale_range, 1.0 + config.scale_range)
    tx = rng.uniform(-config.translate, config.translate) * width
    ty = rng.uniform(-config.translate, config.translate) * height

    # Forward map p' = A p + b, rotating and scaling about the image center.
    a = scale * np.array(
        [[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]
    )
    center = np.array([width / 2.0, height / 2.0])
    b = center + np.array([tx, ty]) - a @ center
    a_inv = np.linalg.inv(a)
    b_inv = -a_inv @ b
    coeffs = (a_inv[0, 0], a_inv[0, 1], b_inv[0], a_inv[1, 0], a_inv[1, 1], b_inv[1])
    warped = images.affine(image, coeffs, fill=PAD_VALUE)

    corners = _corners_px(gts, width, height)
    mapped = np.zeros_like(corners)
    for k, (x1, y1, x2, y2) in enumerate(corners):
        pts = np.array([[x1, y1], [x2, y1], [x1, y2], [x2, y2]]) @ a.T + b
        mapped[k] = (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
    return warped, _clip_gts(
        gts, mapped, (0, 0, width, height), (width, height), config.mosaic_min_area
    )


def basic_transforms(sample: Sample, config: AugmentConfig, seed: int) -> Sample:
    """Seeded crop, flip, affine, HSV jitter and blur, applied in that order.

    Each transform fires with its own probability; with every probability
    at zero the sample comes back unchanged.
    """
    rng = SplitMix64(seed)
    image = sample.image
    gts = list(sample.gts)
    applied = []

    if rng.chance(config.crop_prob):
        image, gts = _crop(image, gts, rng, config)
        applied.append("crop")
    if rng.chance(config.flip_prob):
        image = np.ascontiguousarray(image[:, :, ::-1])
        gts = [
            GroundTruth(g.class_id, Box(1.0 - g.box.cx, g.box.cy, g.box.w, g.box.h)) for g in gts
        ]
        applied.append("flip")
    if rng.chance(config.affine_prob):
        image, gts = _affine(image, gts, rng, config)
        applied.append("affine")
    if rng.chance(config.jitter_prob):
        hue = rng.uniform(-config.hue_gain, config.hue_gain)
        sat = rng.uniform(1.0 - config.saturation_gain, 1.0 + config.saturation_gain)
        val = rng.uniform(1.0 - config.value_gain, 1.0 + config.value_gain)
        image = images.hsv_shift(image, hue, sat, val)
        applied.append("jitter")
    if rng.chance(config.blur_prob):
        image = images.blur(image, rng.uniform(0.0, config.blur_max_radius))
        applied.append("blur")

    if not applied:
        return Sample(
            image=sample.image.copy(),
            gts=gts,
            source_id=sample.source_id,
            letterbox=sample.letterbox,
        )
    logger.debug(f"Augmented {sample.source_id}: {', '.join(applied)}")
    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        gts=gts,
        source_id=sample.source_id,
    )
