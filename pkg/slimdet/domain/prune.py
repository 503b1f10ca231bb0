"""
Network-slimming channel pruning driven by batch-norm gamma magnitudes.

Channels are ranked network-wide; a dependency group (convs tied by
shortcut adds) acts as one pruning unit scored by the max |gamma| of its
members. Pruning rewrites the NetworkDef filter counts and slices kernels
and BN vectors, propagating kept channels through routes and shortcuts
into every consumer's input channels.
"""
import math
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .entities import (
    ConvBlock,
    ConvLayer,
    GammaScore,
    LayerPruneRow,
    NetworkDef,
    PruneMask,
    PrunePlan,
    PruneReport,
    RouteLayer,
    ShortcutLayer,
    WeightStore,
)
from .errors import InconsistentMask, RatioOutOfRange
from .graph import analyze_prunability, count_parameters, infer_shapes, validate


def pruning_units(net: NetworkDef, plan: Optional[PrunePlan] = None) -> Dict[int, Tuple[int, ...]]:
    """Representative layer -> member layers for every prunable unit."""
    plan = plan or analyze_prunability(net)
    unprunable = set(plan.unprunable)
    units: Dict[int, Tuple[int, ...]] = {}
    grouped = set()
    for group in plan.groups:
        grouped.update(group.members)
        if not unprunable.intersection(group.members):
            units[group.members[0]] = group.members
    for i in net.conv_indices():
        if i not in grouped and i not in unprunable:
            units[i] = (i,)
    return dict(sorted(units.items()))


def collect_gammas(
    net: NetworkDef, store: WeightStore, plan: Optional[PrunePlan] = None
) -> List[GammaScore]:
    """One score per prunable output channel; grouped channels score max |gamma|."""
    scores: List[GammaScore] = []
    for rep, members in pruning_units(net, plan).items():
        stacked = np.stack([np.abs(store.blocks[m].bn_gamma) for m in members])
        for channel, value in enumerate(stacked.max(axis=0)):
            scores.append(GammaScore(layer=rep, channel=channel, score=float(value)))
    return scores


def layer_floor(filters: int, floor: int = 1, floor_fraction: float = 0.05) -> int:
    return min(filters, max(floor, 1, math.ceil(floor_fraction * filters)))


def select_mask(
    scores: Sequence[GammaScore],
    ratio: float,
    floor: int = 1,
    floor_fraction: float = 0.05,
    plan: Optional[PrunePlan] = None,
) -> PruneMask:
    """Global threshold at the `ratio` quantile; channels scoring below it go.

    Each unit keeps at least max(floor, ceil(floor_fraction * filters))
    channels, refilled from its highest-scoring pruned channels.
    """
    if not 0.0 <= ratio < 1.0:
        raise RatioOutOfRange(ratio)
    if floor < 1:
        raise ValueError("floor must be >= 1")

    by_unit: Dict[int, List[GammaScore]] = {}
    for s in scores:
        by_unit.setdefault(s.layer, []).append(s)
    values = np.sort(np.array([s.score for s in scores], dtype=np.float64))
    k = int(math.floor(ratio * len(values)))
    threshold = float(values[k]) if len(values) else 0.0

    kept: Dict[int, Tuple[int, ...]] = {}
    pruned_total = 0
    for rep, unit in by_unit.items():
        unit = sorted(unit, key=lambda s: s.channel)
        keep = {s.channel for s in unit if s.score >= threshold}
        need = layer_floor(len(unit), floor, floor_fraction)
        if len(keep) < need:
            refill = sorted(
                (s for s in unit if s.channel not in keep), key=lambda s: (-s.score, s.channel)
            )
            keep.update(s.channel for s in refill[: need - len(keep)])
        kept[rep] = tuple(sorted(keep))
        pruned_total += len(unit) - len(keep)

    if plan is not None:
        for group in plan.groups:
            if group.members[0] in kept:
                for m in group.members[1:]:
                    kept[m] = kept[group.members[0]]

    achieved = pruned_total / len(scores) if scores else 0.0
    logger.info(
        f"Prune mask: requested {ratio:.2f}, threshold {threshold:.6g}, "
        f"achieved {achieved:.4f} over {len(scores)} channels"
    )
    return PruneMask(kept=kept, ratio=ratio, threshold=threshold, achieved_ratio=achieved)


def expand_mask(mask: PruneMask, plan: PrunePlan) -> PruneMask:
    """Copy each group representative's kept list onto every member."""
    kept = dict(mask.kept)
    for group in plan.groups:
        for m in group.members:
            if m in kept:
                for other in group.members:
                    kept.setdefault(other, kept[m])
                break
    return replace(mask, kept=kept)


def _check_mask(net: NetworkDef, mask: PruneMask, plan: PrunePlan) -> None:
    unprunable = set(plan.unprunable)
    for layer, keep in mask.kept.items():
        if not 0 <= layer < len(net.layers) or not isinstance(net.layers[layer], ConvLayer):
            raise InconsistentMask(layer, "not a convolutional layer")
        filters = net.layers[layer].filters
        if keep[-1] >= filters:
            raise InconsistentMask(layer, f"kept index {keep[-1]} >= {filters} filters")
        if layer in unprunable and len(keep) != filters:
            raise InconsistentMask(layer, "layer cannot be pruned")
    for group in plan.groups:
        lists = {mask.kept.get(m) for m in group.members}
        if len(lists) > 1:
            raise InconsistentMask(group.members[0], f"group {group.members} has differing masks")


def _slice_block(
    block: ConvBlock, out_keep: Optional[Sequence[int]], in_keep: Optional[Sequence[int]]
) -> ConvBlock:
    kernel = block.kernel
    if out_keep is not None:
        kernel = kernel[list(out_keep)]
    if in_keep is not None:
        kernel = kernel[:, list(in_keep)]

    def take(v: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if v is None:
            return None
        return v[list(out_keep)].copy() if out_keep is not None else v.copy()

    return ConvBlock(
        kernel=np.ascontiguousarray(kernel),
        bias=take(block.bias),
        bn_beta=take(block.bn_beta),
        bn_gamma=take(block.bn_gamma),
        bn_mean=take(block.bn_mean),
        bn_var=take(block.bn_var),
    )


def apply_mask(
    net: NetworkDef,
    store: WeightStore,
    mask: PruneMask,
    beta_warn: float = 1e-3,
) -> Tuple[NetworkDef, WeightStore]:
    """Build the pruned definition and weights for `mask`."""
    plan = analyze_prunability(net)
    mask = expand_mask(mask, plan)
    _check_mask(net, mask, plan)
    shapes = infer_shapes(net)

    # kept_out[i]: surviving output channels of layer i, in original numbering.
    kept_out: List[List[int]] = []
    new_layers = []
    new_blocks: Dict[int, ConvBlock] = {}
    loud_betas = 0
    for i, layer in enumerate(net.layers):
        in_keep = kept_out[i - 1] if i > 0 else None
        if isinstance(layer, ConvLayer):
            block = store.blocks[i]
            out_keep = list(mask.kept.get(i, range(layer.filters)))
            if block.bn_beta is not None and len(out_keep) < layer.filters:
                dropped = np.setdiff1d(np.arange(layer.filters), out_keep)
                loud_betas += int(np.sum(np.abs(block.bn_beta[dropped]) > beta_warn))
            full_in = shapes.input_shape(net, i).channels
            new_blocks[i] = _slice_block(
                block,
                None if len(out_keep) == layer.filters else out_keep,
                None if in_keep is None or len(in_keep) == full_in else in_keep,
            )
            new_layers.append(replace(layer, filters=len(out_keep)))
            kept_out.append(out_keep)
        elif isinstance(layer, RouteLayer):
            merged: List[int] = []
            offset = 0
            for s in layer.sources:
                step = shapes[s].channels // layer.groups
                lo = layer.group_id * step
                merged += [offset + c - lo for c in kept_out[s] if lo <= c < lo + step]
                offset += step
            if layer.groups > 1 and any(
                len(kept_out[s]) != shapes[s].channels for s in layer.sources
            ):
                raise InconsistentMask(i, "grouped route source was pruned")
            new_layers.append(layer)
            kept_out.append(merged)
        elif isinstance(layer, ShortcutLayer):
            if kept_out[layer.source] != in_keep:
                raise InconsistentMask(i, "shortcut operands keep different channels")
            new_layers.append(layer)
            kept_out.append(list(in_keep))
        else:
            new_layers.append(layer)
            if in_keep is None:
                in_keep = list(range(net.input_channels))
            kept_out.append(list(in_keep))

    if loud_betas:
        logger.warning(
            f"{loud_betas} pruned channels carry |beta| > {beta_warn:g}; their shift is discarded"
        )
    pruned = net.with_layers(tuple(new_layers))
    issues = validate(pruned)
    if issues:
        raise InconsistentMask(-1, "; ".join(str(e) for e in issues))
    return pruned, WeightStore(header=store.header, blocks=new_blocks)


def prune_report(before: NetworkDef, after: NetworkDef, mask: PruneMask) -> PruneReport:
    rows = tuple(
        LayerPruneRow(layer=i, filters_before=b.filters, filters_after=a.filters)
        for i, (b, a) in enumerate(zip(before.layers, after.layers))
        if isinstance(b, ConvLayer)
    )
    return PruneReport(
        params_before=count_parameters(before).total,
        params_after=count_parameters(after).total,
        ratio_requested=mask.ratio,
        ratio_achieved=mask.achieved_ratio,
        layers=rows,
    )


def prune_model(
    net: NetworkDef,
    store: WeightStore,
    ratio: float,
    floor: int = 1,
    floor_fraction: float = 0.05,
    beta_warn: float = 1e-3,
) -> Tuple[NetworkDef, WeightStore, PruneMask, PruneReport]:
    """collect_gammas -> select_mask -> apply_mask -> prune_report."""
    plan = analyze_prunability(net)
    scores = collect_gammas(net, store, plan)
    mask = select_mask(scores, ratio, floor, floor_fraction, plan)
    pruned_net, pruned_store = apply_mask(net, store, mask, beta_warn)
    report = prune_report(net, pruned_net, mask)
    logger.info(
        f"Pruned '{net.source_name}' at r={ratio:.2f}: {report.params_before:,} -> "
        f"{report.params_after:,} parameters ({report.param_fraction:.3f})"
    )
    return pruned_net, pruned_store, mask, report
