"""
Pillow-backed image codec and pixel operations.

Images travel through the toolkit as float32 arrays of shape 3 x H x W with
values in [0, 1]. Geometric resampling runs per channel in Pillow's "F"
mode so no precision is lost; photometric operations go through 8-bit RGB.
"""
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from PIL import Image, ImageDraw, ImageFilter, UnidentifiedImageError

from ..domain.entities import CLASS_COLORS, CLASS_NAMES, Detection, GroundTruth
from ..domain.errors import DatasetError

PathLike = Union[str, Path]


def from_pil(img: Image.Image) -> np.ndarray:
    rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def to_pil(image: np.ndarray) -> Image.Image:
    hwc = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(hwc)


def load_image(path: PathLike) -> np.ndarray:
    """Decode a PNG/JPEG file into a 3 x H x W float array.

    Raises:
        DatasetError: If the file is missing or not a decodable image
    """
    try:
        with Image.open(path) as img:
            return from_pil(img)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Cannot decode image {path}: {e}") from e


def save_image(path: PathLike, image: Union[np.ndarray, Image.Image]) -> None:
    img = image if isinstance(image, Image.Image) else to_pil(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    logger.debug(f"Wrote image {path} ({img.width}x{img.height})")


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a 3 x H x W float array to width x height."""
    if image.shape[2] == width and image.shape[1] == height:
        return image.copy()
    channels = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(ch, dtype=np.float32)).resize(
                (width, height), Image.BILINEAR
            ),
            dtype=np.float32,
        )
        for ch in image
    ]
    return np.clip(np.stack(channels), 0.0, 1.0)


def affine(
    image: np.ndarray, inverse: Sequence[float], fill: float = 0.5
) -> np.ndarray:
    """Warp with the 2 x 3 output->input matrix `inverse` (Pillow's AFFINE order)."""
    height, width = image.shape[1:]
    coeffs = tuple(float(c) for c in inverse)
    channels = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(ch, dtype=np.float32)).transform(
                (width, height), Image.AFFINE, coeffs, resample=Image.BILINEAR, fillcolor=fill
            ),
            dtype=np.float32,
        )
        for ch in image
    ]
    return np.clip(np.stack(channels), 0.0, 1.0)


def hsv_shift(image: np.ndarray, hue: float, saturation: float, value: float) -> np.ndarray:
    """Rotate hue by `hue` turns and scale saturation/value by the given gains."""
    hsv = np.asarray(to_pil(image).convert("HSV"), dtype=np.float32)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue * 256.0, 256.0)
    hsv[..., 1] = hsv[..., 1] * saturation
    hsv[..., 2] = hsv[..., 2] * value
    packed = np.clip(np.rint(hsv), 0, 255).astype(np.uint8)
    shifted = Image.frombytes("HSV", (packed.shape[1], packed.shape[0]), packed.tobytes())
    return from_pil(shifted.convert("RGB"))


def blur(image: np.ndarray, radius: float) -> np.ndarray:
    if radius <= 0:
        return image.copy()
    return from_pil(to_pil(image).filter(ImageFilter.GaussianBlur(radius=radius)))


def _color(class_id: int) -> Tuple[int, int, int]:
    return CLASS_COLORS[class_id % len(CLASS_COLORS)]


def _label(class_id: int, names: Sequence[str]) -> str:
    return names[class_id] if class_id < len(names) else str(class_id)


def draw_annotations(
    image: np.ndarray,
    detections: Sequence[Detection] = (),
    gts: Sequence[GroundTruth] = (),
    names: Optional[Sequence[str]] = None,
) -> Image.Image:
    """Render boxes on a copy of `image`: ground truth thin, detections with scores."""
    names = names or CLASS_NAMES
    canvas = to_pil(image)
    draw = ImageDraw.Draw(canvas)
    width, height = canvas.size

    def corners(box) -> Tuple[float, float, float, float]:
        x1, y1, x2, y2 = box.to_corners()
        return x1 * width, y1 * height, x2 * width, y2 * height

    for gt in gts:
        draw.rectangle(corners(gt.box), outline=_color(gt.class_id), width=1)
    for det in detections:
        x1, y1, x2, y2 = corners(det.box)
        draw.rectangle((x1, y1, x2, y2), outline=_color(det.class_id), width=2)
        draw.text(
            (x1 + 2, max(0.0, y1 - 11)),
            f"{_label(det.class_id, names)} {det.confidence:.2f}",
            fill=_color(det.class_id),
        )
    return canvas
