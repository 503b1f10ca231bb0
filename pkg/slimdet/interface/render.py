"""
Plain-text tables for the CLI reports.
"""
from typing import List, Sequence

from ..domain.entities import CLASS_NAMES, EvalResult, FpsReport, PruneReport, SweepRow
from ..domain.errors import SlimdetError
from ..domain.graph import LayerRow


def table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Left-aligned columns sized to their widest cell."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[k]) for r in cells) for k in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_layers(rows: Sequence[LayerRow], total_params: int) -> str:
    body = [
        (
            r.index,
            r.kind,
            f"{r.shape.channels}x{r.shape.height}x{r.shape.width}",
            f"{r.params:,}",
            "yes" if r.prunable else "",
            "" if r.group is None else r.group,
        )
        for r in rows
    ]
    out = table(("layer", "kind", "output", "params", "prunable", "group"), body)
    return f"{out}\n\ntotal parameters: {total_params:,}"


def render_issues(issues: Sequence[SlimdetError]) -> str:
    if not issues:
        return "ok"
    return "\n".join(f"{type(e).__name__}: {e}" for e in issues)


def render_eval(result: EvalResult, names: Sequence[str] = CLASS_NAMES) -> str:
    body: List[Sequence[object]] = []
    for s in result.per_class:
        name = names[s.class_id] if s.class_id < len(names) else str(s.class_id)
        ap = "n/a" if s.ap is None else f"{s.ap:.4f}"
        body.append((name, ap, s.tp, s.fp, s.fn, s.n_gt))
    out = table(("class", "AP", "TP", "FP", "FN", "GT"), body)
    return f"{out}\n\nmAP@{result.iou_thresh:g}: {result.map:.4f}"


def render_fps(report: FpsReport) -> str:
    return (
        f"images {report.image_count} (warmup {report.warmup_count})\n"
        f"wall time {report.wall_time:.3f}s  fps {report.fps:.2f}\n"
        f"latency p50 {report.p50 * 1000:.2f}ms  p95 {report.p95 * 1000:.2f}ms\n"
        f"mean detections per image {report.mean_detections:.2f}"
    )


def render_prune(report: PruneReport) -> str:
    body = [
        (r.layer, r.filters_before, r.filters_after)
        for r in report.layers
        if r.filters_before != r.filters_after
    ]
    out = table(("layer", "filters", "kept"), body) if body else "no channels pruned"
    return (
        f"{out}\n\nratio requested {report.ratio_requested:.2f}, "
        f"achieved {report.ratio_achieved:.4f}\n"
        f"parameters {report.params_before:,} -> {report.params_after:,} "
        f"({report.param_fraction:.3f})"
    )


def render_sweep(rows: Sequence[SweepRow]) -> str:
    body = []
    for r in rows:
        notes = []
        if r.best_map:
            notes.append("best mAP")
        if r.most_efficient:
            notes.append("most efficient")
        if r.excess_boxes:
            notes.append("excess boxes")
        marker = "*" if r.most_efficient else ""
        body.append(
            (
                f"{r.ratio:.0%}{marker}",
                f"{r.params:,}",
                f"{r.map:.4f}",
                f"{r.fps:.2f}",
                f"{r.mean_detections:.1f}",
                ", ".join(notes),
            )
        )
    return table(("pruned", "params", "mAP", "FPS", "dets/img", "note"), body)
