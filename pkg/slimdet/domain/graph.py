"""
Static analysis over network definitions: shapes, parameter counts,
validation and pruning dependency groups.
"""
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from loguru import logger

from .entities import (
    Activation,
    ConvLayer,
    DependencyGroup,
    GroupReason,
    LayerShape,
    MaxPoolLayer,
    NetworkDef,
    PrunePlan,
    RouteLayer,
    ShapeTable,
    ShortcutLayer,
    UpsampleLayer,
    YoloLayer,
)
from .errors import (
    BadReference,
    EmptyNetwork,
    GraphError,
    NonLinearHead,
    ShapeConflict,
    SlimdetError,
    YoloFilterMismatch,
)


@dataclass(frozen=True)
class ParameterCount:
    per_layer: Tuple[int, ...]
    total: int

    def subtotal(self, layers) -> int:
        return sum(self.per_layer[i] for i in layers)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, stride: int) -> int:
    """Darknet pooling pads size-1 in total, so the window size cancels out."""
    return (size - 1) // stride + 1


def _walk_shapes(net: NetworkDef, issues: Optional[List[SlimdetError]]) -> ShapeTable:
    def fail(error: SlimdetError) -> None:
        if issues is None:
            raise error
        issues.append(error)

    shapes: List[LayerShape] = []
    current = LayerShape(net.input_channels, net.input_height, net.input_width)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer):
            h = conv_output_size(current.height, layer.size, layer.stride, layer.padding)
            w = conv_output_size(current.width, layer.size, layer.stride, layer.padding)
            if h < 1 or w < 1:
                fail(ShapeConflict(i, f"convolution collapses {current.height}x{current.width}"))
                h, w = max(h, 1), max(w, 1)
            out = LayerShape(layer.filters, h, w)
        elif isinstance(layer, MaxPoolLayer):
            out = LayerShape(
                current.channels,
                pool_output_size(current.height, layer.stride),
                pool_output_size(current.width, layer.stride),
            )
        elif isinstance(layer, UpsampleLayer):
            out = LayerShape(
                current.channels, current.height * layer.factor, current.width * layer.factor
            )
        elif isinstance(layer, RouteLayer):
            srcs = []
            for s in layer.sources:
                if not 0 <= s < i:
                    fail(BadReference(i, s))
                    continue
                srcs.append(shapes[s])
            if not srcs:
                out = current
            else:
                if len({(s.height, s.width) for s in srcs}) > 1:
                    dims = ", ".join(f"{s.height}x{s.width}" for s in srcs)
                    fail(ShapeConflict(i, f"route sources differ spatially ({dims})"))
                channels = 0
                for s in srcs:
                    if s.channels % layer.groups:
                        fail(ShapeConflict(i, f"{s.channels} channels not divisible by groups"))
                    channels += s.channels // layer.groups
                out = LayerShape(channels, srcs[0].height, srcs[0].width)
        elif isinstance(layer, ShortcutLayer):
            if not 0 <= layer.source < i:
                fail(BadReference(i, layer.source))
            elif shapes[layer.source] != current:
                a, b = current, shapes[layer.source]
                fail(
                    ShapeConflict(
                        i,
                        f"shortcut adds {a.channels}x{a.height}x{a.width} "
                        f"and {b.channels}x{b.height}x{b.width}",
                    )
                )
            out = current
        else:
            out = current
        shapes.append(out)
        current = out

    outputs = tuple(net.yolo_indices()) or ((len(net.layers) - 1,) if net.layers else ())
    return ShapeTable(shapes=tuple(shapes), outputs=outputs)


def infer_shapes(net: NetworkDef) -> ShapeTable:
    """Per-layer output shapes; raises ShapeConflict on the first inconsistency."""
    return _walk_shapes(net, None)


def conv_in_channels(net: NetworkDef, shapes: ShapeTable) -> Dict[int, int]:
    return {i: shapes.input_shape(net, i).channels for i in net.conv_indices()}


def count_parameters(net: NetworkDef) -> ParameterCount:
    """Float counts per layer: n*c*k*k + (4n with batch norm, else n)."""
    shapes = infer_shapes(net)
    per_layer = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer):
            c = shapes.input_shape(net, i).channels
            n = layer.filters
            extra = 4 * n if layer.batch_normalize else n
            per_layer.append(n * c * layer.size * layer.size + extra)
        else:
            per_layer.append(0)
    return ParameterCount(per_layer=tuple(per_layer), total=sum(per_layer))


def _input_of(index: int) -> Optional[int]:
    return index - 1 if index > 0 else None


def feeding_convs(net: NetworkDef, index: Optional[int]) -> Set[int]:
    """Every conv whose channels reach layer `index` without passing another conv."""
    if index is None:
        return set()
    layer = net.layers[index]
    if isinstance(layer, ConvLayer):
        return {index}
    if isinstance(layer, RouteLayer):
        found: Set[int] = set()
        for s in layer.sources:
            found |= feeding_convs(net, s)
        return found
    if isinstance(layer, ShortcutLayer):
        return feeding_convs(net, _input_of(index)) | feeding_convs(net, layer.source)
    return feeding_convs(net, _input_of(index))


def _producers(
    net: NetworkDef, index: Optional[int]
) -> Tuple[Optional[FrozenSet[int]], bool]:
    """Convs whose output channels map one-to-one onto layer `index`'s channels.

    Returns (None, _) when the mapping is not one-to-one (concatenation,
    channel groups or the raw network input). The flag reports whether a
    single-source route was traversed.
    """
    if index is None:
        return None, False
    layer = net.layers[index]
    if isinstance(layer, ConvLayer):
        return frozenset({index}), False
    if isinstance(layer, (MaxPoolLayer, UpsampleLayer, YoloLayer)):
        return _producers(net, _input_of(index))
    if isinstance(layer, ShortcutLayer):
        a, via_a = _producers(net, _input_of(index))
        b, via_b = _producers(net, layer.source)
        if a is None or b is None:
            return None, via_a or via_b
        return a | b, via_a or via_b
    if len(layer.sources) == 1 and layer.groups == 1:
        found, _ = _producers(net, layer.sources[0])
        return found, True
    return None, False


class _UnionFind:
    def __init__(self) -> None:
        self.parent: Dict[int, int] = {}

    def find(self, x: int) -> int:
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def analyze_prunability(net: NetworkDef) -> PrunePlan:
    """Dependency groups plus the set of conv layers that must keep every channel."""
    uf = _UnionFind()
    via_route: Set[int] = set()
    unprunable: Set[int] = set()

    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer) and not layer.batch_normalize:
            unprunable.add(i)
        elif isinstance(layer, YoloLayer):
            prev = _input_of(i)
            if prev is not None and isinstance(net.layers[prev], ConvLayer):
                unprunable.add(prev)
        elif isinstance(layer, RouteLayer) and layer.groups > 1:
            for s in layer.sources:
                unprunable |= feeding_convs(net, s)
        elif isinstance(layer, ShortcutLayer):
            a, via_a = _producers(net, _input_of(i))
            b, via_b = _producers(net, layer.source)
            if a is None or b is None:
                # Channel offsets of a concatenation cannot be matched across an add.
                unprunable |= feeding_convs(net, _input_of(i)) | feeding_convs(net, layer.source)
                continue
            members = sorted(a | b)
            for m in members[1:]:
                uf.union(members[0], m)
            if via_a or via_b:
                via_route.add(members[0])

    clusters: Dict[int, List[int]] = {}
    for member in uf.parent:
        clusters.setdefault(uf.find(member), []).append(member)

    groups = []
    for root in sorted(clusters):
        members = tuple(sorted(clusters[root]))
        if len(members) < 2:
            continue
        reason = (
            GroupReason.SHARED_ROUTE_CONSTRAINT
            if any(uf.find(v) == root for v in via_route)
            else GroupReason.SHORTCUT_ADD
        )
        groups.append(DependencyGroup(members=members, reason=reason))
        if unprunable.intersection(members):
            unprunable.update(members)

    logger.debug(
        f"Dependency analysis of '{net.source_name}': {len(groups)} groups, "
        f"{len(unprunable)} unprunable convs"
    )
    return PrunePlan(groups=tuple(groups), unprunable=tuple(sorted(unprunable)))


def dependency_groups(net: NetworkDef) -> List[DependencyGroup]:
    """Conv layers whose output-channel masks must stay identical."""
    return list(analyze_prunability(net).groups)


def validate(net: NetworkDef) -> List[SlimdetError]:
    """Aggregate every structural problem; an empty list means the net is valid."""
    if not net.layers:
        return [EmptyNetwork()]
    issues: List[SlimdetError] = []
    shapes = _walk_shapes(net, issues)
    has_yolo = False
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, YoloLayer):
            continue
        has_yolo = True
        actual = shapes.input_shape(net, i).channels
        if actual != layer.expected_channels:
            issues.append(YoloFilterMismatch(i, layer.expected_channels, actual))
        head = net.layers[i - 1] if i > 0 else None
        if (
            isinstance(head, ConvLayer)
            and not head.batch_normalize
            and head.activation is not Activation.LINEAR
        ):
            issues.append(NonLinearHead(i, i - 1, head.activation.value))
    if has_yolo and (net.input_width % 32 or net.input_height % 32):
        issues.append(
            GraphError(
                f"Input {net.input_width}x{net.input_height} not divisible by 32 "
                "for a yolo network"
            )
        )
    return issues


@dataclass(frozen=True)
class LayerRow:
    index: int
    kind: str
    shape: LayerShape
    params: int
    prunable: bool
    group: Optional[int]


def layer_table(net: NetworkDef) -> List[LayerRow]:
    """Rows for the `inspect` listing."""
    shapes = infer_shapes(net)
    counts = count_parameters(net)
    plan = analyze_prunability(net)
    group_ids = {m: g for g, group in enumerate(plan.groups) for m in group.members}
    rows = []
    for i, layer in enumerate(net.layers):
        is_conv = isinstance(layer, ConvLayer)
        rows.append(
            LayerRow(
                index=i,
                kind=layer.kind.value,
                shape=shapes[i],
                params=counts.per_layer[i],
                prunable=is_conv and i not in plan.unprunable,
                group=group_ids.get(i),
            )
        )
    return rows
