"""
Network description codec (darknet-style section/key=value text).
"""
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from loguru import logger

from ..domain.entities import (
    Activation,
    ConvLayer,
    LayerSpec,
    MaxPoolLayer,
    NetworkDef,
    RouteLayer,
    ShortcutLayer,
    UpsampleLayer,
    YoloLayer,
)
from ..domain.errors import (
    BadReference,
    EmptyNetwork,
    MalformedSection,
    MissingRequiredKey,
    NetCfgError,
    UnknownLayerKind,
)

NET_SECTIONS = ("net", "network")
BUNDLED_NETWORKS = ("yolov4", "yolov4-tiny", "toy")

# Keys darknet uses for training only; kept verbatim without a warning.
_NET_TRAINING_KEYS = frozenset(
    {
        "batch", "subdivisions", "momentum", "decay", "angle", "saturation", "exposure", "hue",
        "learning_rate", "burn_in", "max_batches", "policy", "steps", "scales", "mosaic",
        "letter_box", "flip", "blur", "mixup", "cutmix", "max_chart_loss",
    }
)

_PASSTHROUGH_KEYS: Dict[str, frozenset] = {
    "yolo": frozenset(
        {
            "num", "jitter", "ignore_thresh", "truth_thresh", "random", "resize",
            "iou_thresh", "cls_normalizer", "iou_normalizer", "obj_normalizer",
            "iou_loss", "nms_kind", "beta_nms", "max_delta", "counters_per_class",
            "label_smooth_eps", "new_coords", "max",
        }
    ),
    "net": _NET_TRAINING_KEYS,
    "network": _NET_TRAINING_KEYS,
}


@dataclass
class _Section:
    name: str
    line: int
    items: List[Tuple[str, str]] = field(default_factory=list)

    def as_dict(self) -> Dict[str, str]:
        return dict(self.items)


def _read_sections(text: str) -> List[_Section]:
    sections: List[_Section] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise MalformedSection(lineno, raw)
            sections.append(_Section(line[1:-1].strip().lower(), lineno))
            continue
        if "=" not in line or not sections:
            raise MalformedSection(lineno, raw)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise MalformedSection(lineno, raw)
        sections[-1].items.append((key, value.strip()))
    return sections


class _KeyReader:
    """Typed access to a section's keys; remembers which keys were consumed."""

    def __init__(self, section: _Section) -> None:
        self.section = section
        self.values = section.as_dict()
        self.used: set = set()

    def _raw(self, key: str, default: Optional[str]) -> str:
        self.used.add(key)
        if key in self.values:
            return self.values[key]
        if default is None:
            raise MissingRequiredKey(self.section.name, key)
        return default

    def _convert(self, key: str, raw: str, fn: Callable):
        try:
            return fn(raw)
        except ValueError as e:
            raise MalformedSection(self.section.line, f"{key}={raw}") from e

    def get_int(self, key: str, default: Optional[int] = None) -> int:
        raw = self._raw(key, None if default is None else str(default))
        return self._convert(key, raw, lambda v: int(float(v)))

    def get_float(self, key: str, default: Optional[float] = None) -> float:
        raw = self._raw(key, None if default is None else repr(default))
        return self._convert(key, raw, float)

    def get_ints(self, key: str, default: Optional[str] = None) -> Tuple[int, ...]:
        raw = self._raw(key, default)
        return self._convert(
            key, raw, lambda v: tuple(int(p) for p in v.replace(" ", "").split(",") if p)
        )

    def get_floats(self, key: str, default: Optional[str] = None) -> Tuple[float, ...]:
        raw = self._raw(key, default)
        return self._convert(
            key, raw, lambda v: tuple(float(p) for p in v.replace(" ", "").split(",") if p)
        )

    def activation(self, key: str = "activation", default: str = "logistic") -> Activation:
        raw = self._raw(key, default)
        return self._convert(key, raw, Activation.parse)

    def extra(self) -> Tuple[Tuple[str, str], ...]:
        quiet = _PASSTHROUGH_KEYS.get(self.section.name, frozenset())
        leftover = []
        for key, value in self.section.items:
            if key in self.used:
                continue
            if key not in quiet:
                logger.warning(
                    f"Unknown key '{key}' in [{self.section.name}] at line "
                    f"{self.section.line}; preserved"
                )
            leftover.append((key, value))
        return tuple(leftover)


def _resolve(index: int, ref: int) -> int:
    """Negative references are relative to the current layer (-1 = previous)."""
    return index + ref if ref < 0 else ref


def _check_ref(index: int, raw: int, resolved: int) -> int:
    if not 0 <= resolved < index:
        raise BadReference(index, raw)
    return resolved


def _build_layer(section: _Section, index: int) -> LayerSpec:
    keys = _KeyReader(section)
    kind = section.name
    try:
        if kind in ("convolutional", "conv"):
            return ConvLayer(
                filters=keys.get_int("filters"),
                size=keys.get_int("size", 1),
                stride=keys.get_int("stride", 1),
                pad=bool(keys.get_int("pad", 0)),
                batch_normalize=bool(keys.get_int("batch_normalize", 0)),
                activation=keys.activation(),
                extra=keys.extra(),
            )
        if kind in ("maxpool", "max"):
            stride = keys.get_int("stride", 1)
            return MaxPoolLayer(
                size=keys.get_int("size", stride), stride=stride, extra=keys.extra()
            )
        if kind == "upsample":
            return UpsampleLayer(factor=keys.get_int("stride", 2), extra=keys.extra())
        if kind == "route":
            refs = keys.get_ints("layers")
            if not refs:
                raise MissingRequiredKey(kind, "layers")
            sources = tuple(_check_ref(index, r, _resolve(index, r)) for r in refs)
            return RouteLayer(
                sources=sources,
                groups=keys.get_int("groups", 1),
                group_id=keys.get_int("group_id", 0),
                extra=keys.extra(),
            )
        if kind == "shortcut":
            raw = keys.get_int("from")
            return ShortcutLayer(
                source=_check_ref(index, raw, _resolve(index, raw)),
                activation=keys.activation(default="linear"),
                extra=keys.extra(),
            )
        if kind in ("yolo", "region"):
            flat = keys.get_floats("anchors")
            if len(flat) % 2:
                raise MalformedSection(section.line, "anchors must come in w,h pairs")
            anchors = tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))
            default_mask = ",".join(str(i) for i in range(len(anchors)))
            return YoloLayer(
                anchors=anchors,
                mask=keys.get_ints("mask", default_mask),
                classes=keys.get_int("classes"),
                scale_xy=keys.get_float("scale_x_y", 1.0),
                extra=keys.extra(),
            )
    except ValueError as e:
        if isinstance(e, NetCfgError):
            raise
        raise NetCfgError(f"[{kind}] at line {section.line}: {e}") from e
    raise UnknownLayerKind(kind, section.line)


def parse_cfg(text: str, source_name: str = "network") -> NetworkDef:
    """Parse description text into a NetworkDef with absolute layer references."""
    sections = _read_sections(text)
    if not sections:
        raise MalformedSection(1, "no sections found")
    head = sections[0]
    if head.name not in NET_SECTIONS:
        raise MalformedSection(head.line, f"first section must be [net], got [{head.name}]")

    net_keys = _KeyReader(head)
    width = net_keys.get_int("width")
    height = net_keys.get_int("height")
    channels = net_keys.get_int("channels", 3)
    options = net_keys.extra()

    layers = tuple(_build_layer(section, i) for i, section in enumerate(sections[1:]))
    if any(isinstance(layer, YoloLayer) for layer in layers):
        if width % 32 or height % 32:
            raise NetCfgError(
                f"Input size {width}x{height} must be divisible by 32 for yolo networks"
            )

    net = NetworkDef(
        input_width=width,
        input_height=height,
        input_channels=channels,
        layers=layers,
        source_name=source_name,
        options=options,
    )
    logger.debug(f"Parsed '{source_name}': {len(layers)} layers, input {width}x{height}x{channels}")
    return net


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _layer_lines(layer: LayerSpec, index: int) -> List[str]:
    if isinstance(layer, ConvLayer):
        lines = ["[convolutional]"]
        if layer.batch_normalize:
            lines.append("batch_normalize=1")
        lines += [
            f"filters={layer.filters}",
            f"size={layer.size}",
            f"stride={layer.stride}",
            f"pad={int(layer.pad)}",
            f"activation={layer.activation.value}",
        ]
    elif isinstance(layer, MaxPoolLayer):
        lines = ["[maxpool]", f"size={layer.size}", f"stride={layer.stride}"]
    elif isinstance(layer, UpsampleLayer):
        lines = ["[upsample]", f"stride={layer.factor}"]
    elif isinstance(layer, RouteLayer):
        refs = ",".join(str(s - index) for s in layer.sources)
        lines = ["[route]", f"layers={refs}"]
        if layer.groups != 1:
            lines += [f"groups={layer.groups}", f"group_id={layer.group_id}"]
    elif isinstance(layer, ShortcutLayer):
        lines = [
            "[shortcut]",
            f"from={layer.source - index}",
            f"activation={layer.activation.value}",
        ]
    else:
        anchors = ", ".join(f"{_fmt(w)},{_fmt(h)}" for w, h in layer.anchors)
        lines = [
            "[yolo]",
            f"mask={','.join(str(m) for m in layer.mask)}",
            f"anchors={anchors}",
            f"classes={layer.classes}",
            f"scale_x_y={_fmt(layer.scale_xy)}",
        ]
    lines += [f"{k}={v}" for k, v in layer.extra]
    return lines


def serialize_cfg(net: NetworkDef) -> str:
    """Emit description text; parse_cfg(serialize_cfg(net)) == net."""
    if not net.layers:
        raise EmptyNetwork()
    blocks = [
        "\n".join(
            ["[net]", f"width={net.input_width}", f"height={net.input_height}",
             f"channels={net.input_channels}"]
            + [f"{k}={v}" for k, v in net.options]
        )
    ]
    blocks += ["\n".join(_layer_lines(layer, i)) for i, layer in enumerate(net.layers)]
    return "\n\n".join(blocks) + "\n"


def load_cfg(path: str) -> NetworkDef:
    """Read and parse a description file; the file stem becomes the source name."""
    p = Path(path)
    return parse_cfg(p.read_text(encoding="utf-8"), source_name=p.stem)


def bundled_cfg_text(name: str) -> str:
    """Text of a bundled description (`yolov4`, `yolov4-tiny`, `toy`)."""
    resource = resources.files("slimdet.infrastructure.resources").joinpath(f"{name}.cfg")
    return resource.read_text(encoding="utf-8")


def load_bundled_cfg(name: str) -> NetworkDef:
    return parse_cfg(bundled_cfg_text(name), source_name=name)


def load_freeze_table() -> Dict[str, Dict[str, List[Tuple[int, int]]]]:
    """Bundled freeze ranges: network source name -> mode -> inclusive layer ranges."""
    resource = resources.files("slimdet.infrastructure.resources").joinpath("freeze_ranges.json")
    raw = json.loads(resource.read_text(encoding="utf-8"))
    return {
        network: {mode: [(int(a), int(b)) for a, b in ranges] for mode, ranges in modes.items()}
        for network, modes in raw.items()
    }


def resolve_cfg(path_or_name: str) -> NetworkDef:
    """Load a description from disk, falling back to the bundled set by name."""
    if Path(path_or_name).is_file():
        return load_cfg(path_or_name)
    if path_or_name not in BUNDLED_NETWORKS:
        raise FileNotFoundError(f"No network description '{path_or_name}'")
    return load_bundled_cfg(path_or_name)
