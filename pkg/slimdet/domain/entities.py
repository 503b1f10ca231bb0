"""
Core domain entities for the slimdet toolkit.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

CLASS_NAMES: Tuple[str, ...] = ("plastic", "bio", "rov")

# Annotation colours per class id (RGB): plastic blue, bio orange, rov pink.
CLASS_COLORS: Tuple[Tuple[int, int, int], ...] = (
    (30, 90, 255),
    (255, 150, 30),
    (255, 105, 180),
)

ExtraKeys = Tuple[Tuple[str, str], ...]


class Activation(str, Enum):
    """Activation functions understood by the engine."""

    MISH = "mish"
    LEAKY = "leaky"
    LINEAR = "linear"
    SIGMOID = "logistic"

    @classmethod
    def parse(cls, name: str) -> "Activation":
        name = name.strip().lower()
        if name == "sigmoid":
            return cls.SIGMOID
        return cls(name)


class LayerKind(str, Enum):
    CONVOLUTIONAL = "convolutional"
    MAXPOOL = "maxpool"
    UPSAMPLE = "upsample"
    ROUTE = "route"
    SHORTCUT = "shortcut"
    YOLO = "yolo"


@dataclass(frozen=True)
class ConvLayer:
    """Convolution with optional batch normalization and activation."""

    filters: int
    size: int
    stride: int = 1
    pad: bool = True
    batch_normalize: bool = False
    activation: Activation = Activation.LINEAR
    extra: ExtraKeys = ()
    kind: LayerKind = field(default=LayerKind.CONVOLUTIONAL, init=False)

    def __post_init__(self) -> None:
        if self.filters < 1:
            raise ValueError("Convolution filters must be >= 1")
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"Convolution kernel size must be odd, got {self.size}")
        if self.stride < 1:
            raise ValueError("Convolution stride must be >= 1")

    @property
    def padding(self) -> int:
        return self.size // 2 if self.pad else 0


@dataclass(frozen=True)
class MaxPoolLayer:
    size: int
    stride: int
    extra: ExtraKeys = ()
    kind: LayerKind = field(default=LayerKind.MAXPOOL, init=False)

    def __post_init__(self) -> None:
        if self.size < 1 or self.stride < 1:
            raise ValueError("Maxpool size and stride must be >= 1")


@dataclass(frozen=True)
class UpsampleLayer:
    factor: int
    extra: ExtraKeys = ()
    kind: LayerKind = field(default=LayerKind.UPSAMPLE, init=False)

    def __post_init__(self) -> None:
        if self.factor < 1:
            raise ValueError("Upsample factor must be >= 1")


@dataclass(frozen=True)
class RouteLayer:
    """Channel concatenation of earlier layers (absolute indices)."""

    sources: Tuple[int, ...]
    groups: int = 1
    group_id: int = 0
    extra: ExtraKeys = ()
    kind: LayerKind = field(default=LayerKind.ROUTE, init=False)

    def __post_init__(self) -> None:
        if not self.sources:
            raise ValueError("Route needs at least one source layer")
        if self.groups < 1 or not 0 <= self.group_id < self.groups:
            raise ValueError(f"Invalid route group {self.group_id}/{self.groups}")


@dataclass(frozen=True)
class ShortcutLayer:
    """Elementwise add of the previous layer and `source`."""

    source: int
    activation: Activation = Activation.LINEAR
    extra: ExtraKeys = ()
    kind: LayerKind = field(default=LayerKind.SHORTCUT, init=False)


@dataclass(frozen=True)
class YoloLayer:
    anchors: Tuple[Tuple[float, float], ...]
    mask: Tuple[int, ...]
    classes: int
    scale_xy: float = 1.0
    extra: ExtraKeys = ()
    kind: LayerKind = field(default=LayerKind.YOLO, init=False)

    def __post_init__(self) -> None:
        if self.classes < 1:
            raise ValueError("Yolo class count must be >= 1")
        if not self.mask:
            raise ValueError("Yolo mask cannot be empty")
        if any(m < 0 or m >= len(self.anchors) for m in self.mask):
            raise ValueError(f"Yolo mask {self.mask} outside {len(self.anchors)} anchors")

    @property
    def expected_channels(self) -> int:
        return (self.classes + 5) * len(self.mask)

    @property
    def masked_anchors(self) -> Tuple[Tuple[float, float], ...]:
        return tuple(self.anchors[m] for m in self.mask)


LayerSpec = Union[ConvLayer, MaxPoolLayer, UpsampleLayer, RouteLayer, ShortcutLayer, YoloLayer]


@dataclass(frozen=True)
class NetworkDef:
    """Parsed network description: ordered layers plus input geometry."""

    input_width: int
    input_height: int
    input_channels: int
    layers: Tuple[LayerSpec, ...]
    source_name: str = "network"
    options: ExtraKeys = ()

    def __post_init__(self) -> None:
        if self.input_width <= 0 or self.input_height <= 0 or self.input_channels <= 0:
            raise ValueError("Network input dimensions must be positive")

    def __len__(self) -> int:
        return len(self.layers)

    def conv_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, ConvLayer)]

    def yolo_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, YoloLayer)]

    def with_layers(self, layers: Tuple[LayerSpec, ...]) -> "NetworkDef":
        return replace(self, layers=tuple(layers))

    def with_input_size(self, width: int, height: int) -> "NetworkDef":
        return replace(self, input_width=width, input_height=height)


@dataclass(frozen=True)
class WeightsHeader:
    major: int = 0
    minor: int = 2
    revision: int = 5
    seen: int = 0

    @property
    def wide_seen(self) -> bool:
        """Seen counter is 64-bit from format version 0.2 on."""
        return self.major * 10 + self.minor >= 2


@dataclass
class ConvBlock:
    """Parameters of one convolutional layer, in weights-file order."""

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    bn_beta: Optional[np.ndarray] = None
    bn_gamma: Optional[np.ndarray] = None
    bn_mean: Optional[np.ndarray] = None
    bn_var: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4:
            raise ValueError("Kernel must have shape (n, c, k, k)")
        has_bn = self.bn_gamma is not None
        if has_bn == (self.bias is not None):
            raise ValueError("Conv block needs exactly one of bias or batch-norm parameters")

    @property
    def batch_normalize(self) -> bool:
        return self.bn_gamma is not None

    @property
    def filters(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.kernel.shape[1])

    def float_count(self) -> int:
        n = self.filters
        return (4 * n if self.batch_normalize else n) + int(self.kernel.size)

    def copy(self) -> "ConvBlock":
        def dup(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if a is None else a.copy()

        return ConvBlock(
            kernel=self.kernel.copy(),
            bias=dup(self.bias),
            bn_beta=dup(self.bn_beta),
            bn_gamma=dup(self.bn_gamma),
            bn_mean=dup(self.bn_mean),
            bn_var=dup(self.bn_var),
        )


@dataclass
class WeightStore:
    """Per-convolutional-layer parameter blocks keyed by layer index."""

    header: WeightsHeader
    blocks: Dict[int, ConvBlock]

    def total_floats(self) -> int:
        return sum(block.float_count() for block in self.blocks.values())

    def copy(self) -> "WeightStore":
        return WeightStore(
            header=self.header,
            blocks={i: block.copy() for i, block in self.blocks.items()},
        )


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized center format."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"Box extents must be non-negative, got {self.w} x {self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        if x2 < x1 or y2 < y1:
            raise ValueError("Corner box requires x1 <= x2 and y1 <= y2")
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def to_corners(self) -> Tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: Box


@dataclass(frozen=True)
class Detection:
    """Scored, class-labelled box."""

    box: Box
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"Confidence must be in [0, 1], got {self.confidence}")
        if self.class_id < 0:
            raise ValueError("Class id cannot be negative")


@dataclass(frozen=True)
class LetterboxInfo:
    """Forward/inverse mapping between an original image and the network canvas."""

    orig_width: int
    orig_height: int
    net_width: int
    net_height: int
    scale: float
    new_width: int
    new_height: int
    pad_x: int
    pad_y: int


@dataclass
class Sample:
    """One image (3 x H x W, values in [0, 1]) with its annotations."""

    image: np.ndarray
    gts: List[GroundTruth]
    source_id: str
    letterbox: Optional[LetterboxInfo] = None

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"Sample image must be 3 x H x W, got {self.image.shape}")

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])


@dataclass(frozen=True)
class SplitManifest:
    train: str
    test: str
    val: str
    counts: Tuple[int, int, int]
    classes: int = len(CLASS_NAMES)
    names: Optional[str] = None


@dataclass(frozen=True)
class LayerShape:
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class ShapeTable:
    shapes: Tuple[LayerShape, ...]
    outputs: Tuple[int, ...]

    def __getitem__(self, index: int) -> LayerShape:
        return self.shapes[index]

    def input_shape(self, net: NetworkDef, index: int) -> LayerShape:
        """Shape feeding layer `index` (the previous layer, or the network input)."""
        if index == 0:
            return LayerShape(net.input_channels, net.input_height, net.input_width)
        return self.shapes[index - 1]


class GroupReason(str, Enum):
    SHORTCUT_ADD = "shortcut_add"
    SHARED_ROUTE_CONSTRAINT = "shared_route_constraint"


@dataclass(frozen=True)
class DependencyGroup:
    members: Tuple[int, ...]
    reason: GroupReason


@dataclass(frozen=True)
class PrunePlan:
    """Result of dependency analysis: groups and unprunable conv layers."""

    groups: Tuple[DependencyGroup, ...]
    unprunable: Tuple[int, ...]

    def group_of(self, layer: int) -> Optional[DependencyGroup]:
        for group in self.groups:
            if layer in group.members:
                return group
        return None


@dataclass(frozen=True)
class GammaScore:
    """Importance of one prunable output channel (layer = unit representative)."""

    layer: int
    channel: int
    score: float


@dataclass(frozen=True)
class PruneMask:
    kept: Dict[int, Tuple[int, ...]]
    ratio: float
    threshold: float
    achieved_ratio: float = 0.0

    def __post_init__(self) -> None:
        for layer, kept in self.kept.items():
            if not kept:
                raise ValueError(f"Layer {layer} would lose every channel")
            if list(kept) != sorted(set(kept)):
                raise ValueError(f"Kept channels of layer {layer} must be sorted and unique")

    def pruned_channels(self, layer: int, filters: int) -> List[int]:
        kept = set(self.kept.get(layer, range(filters)))
        return [c for c in range(filters) if c not in kept]


@dataclass(frozen=True)
class LayerPruneRow:
    layer: int
    filters_before: int
    filters_after: int


@dataclass(frozen=True)
class PruneReport:
    params_before: int
    params_after: int
    ratio_requested: float
    ratio_achieved: float
    layers: Tuple[LayerPruneRow, ...]

    @property
    def param_fraction(self) -> float:
        return self.params_after / self.params_before if self.params_before else 1.0


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    ap: Optional[float]
    tp: int
    fp: int
    fn: int
    n_gt: int


@dataclass(frozen=True)
class EvalResult:
    per_class: Tuple[ClassStats, ...]
    map: float
    iou_thresh: float
    conf_thresh: float

    def ap(self, class_id: int) -> Optional[float]:
        for stats in self.per_class:
            if stats.class_id == class_id:
                return stats.ap
        return None


@dataclass(frozen=True)
class FpsReport:
    image_count: int
    warmup_count: int
    wall_time: float
    fps: float
    latencies: Tuple[float, ...]
    p50: float
    p95: float
    detections_per_image: Tuple[int, ...]

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise ValueError("FPS must be positive")

    @property
    def mean_detections(self) -> float:
        if not self.detections_per_image:
            return 0.0
        return float(np.mean(self.detections_per_image))


@dataclass(frozen=True)
class LossBreakdown:
    ciou: float = 0.0
    obj: float = 0.0
    noobj: float = 0.0
    cls: float = 0.0
    sparsity: float = 0.0

    @property
    def total(self) -> float:
        return self.ciou + self.obj + self.noobj + self.cls + self.sparsity

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            ciou=self.ciou + other.ciou,
            obj=self.obj + other.obj,
            noobj=self.noobj + other.noobj,
            cls=self.cls + other.cls,
            sparsity=self.sparsity + other.sparsity,
        )

    def scaled(self, factor: float) -> "LossBreakdown":
        return LossBreakdown(
            ciou=self.ciou * factor,
            obj=self.obj * factor,
            noobj=self.noobj * factor,
            cls=self.cls * factor,
            sparsity=self.sparsity * factor,
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: LossBreakdown
    gamma_sparsity: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    final_map: Optional[float] = None

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SweepRow:
    """One prune ratio of a sweep with its accuracy, speed and size."""

    ratio: float
    params: int
    map: float
    fps: float
    mean_detections: float
    best_map: bool = False
    most_efficient: bool = False
    excess_boxes: bool = False
