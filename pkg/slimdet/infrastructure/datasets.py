"""
Dataset repositories: YOLO-convention image lists and a synthetic shapes generator.
"""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from PIL import ImageDraw
from tqdm import tqdm

from ..domain.entities import CLASS_COLORS, CLASS_NAMES, Box, GroundTruth, Sample, SplitManifest
from ..domain.errors import BoxOutOfRange, DatasetError, MalformedLine, MissingLabel
from ..domain.repositories import DatasetRepository
from ..domain.rng import SplitMix64, derive_seed
from . import images

PathLike = Union[str, Path]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Source dataset split: 5719 train, 1144 test, 820 validation of 7683 frames.
DEFAULT_SPLIT = (5719, 1144, 820)


def parse_labels(
    text: str, source: str = "<labels>", classes: int = len(CLASS_NAMES)
) -> List[GroundTruth]:
    """Parse "class cx cy w h" lines; boxes are clamped to the unit square.

    Raises:
        MalformedLine: Wrong field count, non-numeric values or an invalid class id
        BoxOutOfRange: A coordinate outside [0, 1]
    """
    gts = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 5:
            raise MalformedLine(source, n, raw)
        try:
            class_id = int(fields[0])
            values = tuple(float(v) for v in fields[1:])
        except ValueError as e:
            raise MalformedLine(source, n, raw) from e
        if not 0 <= class_id < classes:
            raise MalformedLine(source, n, raw)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise BoxOutOfRange(source, n, values)

        cx, cy, w, h = values
        x1, y1 = max(cx - w / 2.0, 0.0), max(cy - h / 2.0, 0.0)
        x2, y2 = min(cx + w / 2.0, 1.0), min(cy + h / 2.0, 1.0)
        if x2 <= x1 or y2 <= y1:
            logger.warning(f"Dropping zero-area box at line {n} in {source}")
            continue
        gts.append(GroundTruth(class_id, Box.from_corners(x1, y1, x2, y2)))
    return gts


def format_labels(gts: Sequence[GroundTruth]) -> str:
    return "".join(
        f"{g.class_id} {g.box.cx:.6f} {g.box.cy:.6f} {g.box.w:.6f} {g.box.h:.6f}\n" for g in gts
    )


def write_labels(path: PathLike, gts: Sequence[GroundTruth]) -> None:
    Path(path).write_text(format_labels(gts), encoding="utf-8")


def read_image_list(list_file: PathLike) -> List[Path]:
    """Image paths from a list file, relative entries resolved against its directory."""
    list_path = Path(list_file)
    try:
        text = list_path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Cannot read image list {list_path}: {e}") from e
    paths = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        path = Path(line)
        paths.append(path if path.is_absolute() else list_path.parent / path)
    return paths


def list_images(directory: PathLike) -> List[Path]:
    """PNG/JPEG files of a directory in sorted path order."""
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def label_path_for(image: Path, label_dir: Optional[PathLike] = None) -> Path:
    if label_dir is not None:
        return Path(label_dir) / f"{image.stem}.txt"
    return image.with_suffix(".txt")


def load_sample(
    image: Path, label_dir: Optional[PathLike] = None, classes: int = len(CLASS_NAMES)
) -> Sample:
    label = label_path_for(image, label_dir)
    if not label.is_file():
        raise MissingLabel(str(image))
    gts = parse_labels(label.read_text(encoding="utf-8"), str(label), classes)
    return Sample(image=images.load_image(image), gts=gts, source_id=str(image))


class ListFileDataset(DatasetRepository):
    """Images named by a list file, each with a sibling (or label_dir) YOLO label file."""

    def __init__(
        self,
        list_file: PathLike,
        label_dir: Optional[PathLike] = None,
        classes: int = len(CLASS_NAMES),
        threads: int = 1,
        progress: bool = False,
    ) -> None:
        self.list_file = Path(list_file)
        self.label_dir = label_dir
        self.classes = classes
        self.threads = threads
        self.progress = progress

    def load_samples(self) -> List[Sample]:
        """
        Decode every listed image together with its labels.

        Returns:
            Samples in list-file order

        Raises:
            MissingLabel: If an image has no label file
            DatasetError: If an image cannot be decoded
        """
        paths = read_image_list(self.list_file)
        logger.info(f"Loading {len(paths)} samples from {self.list_file}")

        def load(path: Path) -> Sample:
            return load_sample(path, self.label_dir, self.classes)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            loaded = pool.map(load, paths)
            samples = list(
                tqdm(loaded, total=len(paths), desc="images", disable=not self.progress)
            )
        boxes = sum(len(s.gts) for s in samples)
        logger.info(f"Loaded {len(samples)} samples with {boxes} boxes")
        return samples

    def describe(self) -> str:
        return f"list file {self.list_file}"


class SyntheticShapesDataset(DatasetRepository):
    """
    Colored rectangles and ellipses on noise, one class per shape style.

    Class 0 draws blue rectangles, class 1 orange ellipses and class 2 pink
    ellipses with a dark outline. Sample i is a pure function of (seed, i).
    """

    def __init__(
        self,
        count: int,
        width: int = 64,
        height: int = 64,
        seed: int = 0,
        max_objects: int = 2,
        classes: int = len(CLASS_NAMES),
    ) -> None:
        if count < 1 or max_objects < 1:
            raise ValueError("count and max_objects must be >= 1")
        self.count = count
        self.width = width
        self.height = height
        self.seed = seed
        self.max_objects = max_objects
        self.classes = classes

    def sample(self, index: int) -> Sample:
        source_id = f"synthetic-{index:05d}"
        rng = SplitMix64(derive_seed(self.seed, source_id))
        noise = 0.25 + 0.25 * rng.random_array(3 * self.height * self.width)
        canvas = images.to_pil(noise.reshape(3, self.height, self.width).astype(np.float32))
        draw = ImageDraw.Draw(canvas)

        gts = []
        for _ in range(rng.randint(1, self.max_objects)):
            class_id = rng.randint(0, self.classes - 1)
            w = rng.randint(self.width // 5, self.width // 2)
            h = rng.randint(self.height // 5, self.height // 2)
            x1 = rng.randint(0, self.width - w)
            y1 = rng.randint(0, self.height - h)
            shape = (x1, y1, x1 + w - 1, y1 + h - 1)
            color = CLASS_COLORS[class_id % len(CLASS_COLORS)]
            if class_id == 0:
                draw.rectangle(shape, fill=color)
            elif class_id == 1:
                draw.ellipse(shape, fill=color)
            else:
                draw.ellipse(shape, fill=color, outline=(40, 40, 40), width=2)
            gts.append(
                GroundTruth(
                    class_id,
                    Box.from_corners(
                        x1 / self.width,
                        y1 / self.height,
                        (x1 + w) / self.width,
                        (y1 + h) / self.height,
                    ),
                )
            )
        return Sample(image=images.from_pil(canvas), gts=gts, source_id=source_id)

    def load_samples(self) -> List[Sample]:
        return [self.sample(i) for i in range(self.count)]

    def describe(self) -> str:
        return f"{self.count} synthetic {self.width}x{self.height} shapes (seed {self.seed})"


def _parse_manifest(text: str) -> Dict[str, str]:
    entries = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetError(f"Manifest line without '=': {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def load_split_manifest(path: PathLike) -> SplitManifest:
    """
    Read a darknet `.data` file (train=, valid=, test=, classes=, names=).

    Relative list paths resolve against the manifest's directory. A missing
    test entry falls back to the validation list.

    Raises:
        DatasetError: If a list is missing, unreadable, or shares images with another
    """
    manifest_path = Path(path)
    try:
        entries = _parse_manifest(manifest_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetError(f"Cannot read manifest {manifest_path}: {e}") from e

    def resolve(key: str) -> str:
        value = entries.get(key)
        if value is None:
            raise DatasetError(f"Manifest {manifest_path} has no '{key}' entry")
        p = Path(value)
        return str(p if p.is_absolute() else manifest_path.parent / p)

    train, val = resolve("train"), resolve("valid")
    test = resolve("test") if "test" in entries else val
    lists = {
        name: read_image_list(p) for name, p in (("train", train), ("test", test), ("val", val))
    }
    seen: Dict[Path, str] = {}
    for name, paths in lists.items():
        if name == "test" and test == val:
            continue
        for p in paths:
            if p in seen:
                raise DatasetError(f"{p} appears in both the {seen[p]} and {name} lists")
            seen[p] = name

    names = entries.get("names")
    if names and not Path(names).is_absolute():
        names = str(manifest_path.parent / names)
    return SplitManifest(
        train=train,
        test=test,
        val=val,
        counts=(len(lists["train"]), len(lists["test"]), len(lists["val"])),
        classes=int(entries.get("classes", len(CLASS_NAMES))),
        names=names,
    )


def split_image_list(
    paths: Sequence[PathLike], seed: int, counts: Optional[Tuple[int, int, int]] = None
) -> Tuple[List[str], List[str], List[str]]:
    """Seeded (train, test, val) split; proportions follow DEFAULT_SPLIT when counts is None."""
    items = [str(p) for p in paths]
    if counts is None:
        total = sum(DEFAULT_SPLIT)
        n_train = int(round(len(items) * DEFAULT_SPLIT[0] / total))
        n_test = int(round(len(items) * DEFAULT_SPLIT[1] / total))
        counts = (n_train, n_test, max(len(items) - n_train - n_test, 0))
    if any(c < 0 for c in counts) or sum(counts) > len(items):
        raise ValueError(f"Split counts {counts} do not fit {len(items)} images")
    shuffled = SplitMix64(seed).shuffled(items)
    n_train, n_test, n_val = counts
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_test],
        shuffled[n_train + n_test : n_train + n_test + n_val],
    )
