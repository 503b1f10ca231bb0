"""
Command-line interface: one `slimdet` binary with a subcommand per use case.

Flags override values from `--config FILE` (key=value lines), which override
the SLIMDET_* environment settings.
"""
import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

from loguru import logger
from pydantic import ValidationError

from ..application.use_cases import (
    AugmentPreviewUseCase,
    BenchmarkUseCase,
    EvaluateUseCase,
    FineTuneUseCase,
    InferUseCase,
    InspectModelUseCase,
    PruneUseCase,
    SweepUseCase,
    TrainUseCase,
    ValidateModelUseCase,
)
from ..domain.configs import AugmentConfig, FreezeMode, InitMode, SparsityConfig, TrainConfig
from ..domain.entities import CLASS_NAMES
from ..domain.errors import DatasetError, MissingLabel, SlimdetError, WeightsError
from ..domain.repositories import DatasetRepository
from ..infrastructure.config import settings
from ..infrastructure.datasets import (
    IMAGE_SUFFIXES,
    ListFileDataset,
    SyntheticShapesDataset,
    list_images,
    load_split_manifest,
)
from ..infrastructure.model_repository import FileModelRepository
from .dto import (
    DetectionDTO,
    EpochRecordDTO,
    EvalResultDTO,
    FpsReportDTO,
    PruneReportDTO,
    SweepRowDTO,
)
from .render import (
    render_eval,
    render_fps,
    render_issues,
    render_layers,
    render_prune,
    render_sweep,
)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID = 2
EXIT_WEIGHTS = 3
EXIT_IO = 4

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


# Argument helpers


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def parse_ratios(text: str) -> List[float]:
    """"0.2,0.5" or an inclusive "start:stop:step" range."""
    text = text.strip()
    if not text:
        raise argparse.ArgumentTypeError("empty ratio list")
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            count = int(round((stop - start) / step)) + 1
            ratios = [round(start + k * step, 10) for k in range(count)]
        else:
            ratios = [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}: {e}") from e
    if not ratios:
        raise argparse.ArgumentTypeError("empty ratio list")
    return ratios


def parse_ranges(text: str) -> List[Tuple[int, int]]:
    """Inclusive layer ranges such as "0-6,13-16"."""
    ranges = []
    try:
        for part in text.split(","):
            start, _, end = part.strip().partition("-")
            ranges.append((int(start), int(end or start)))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad layer ranges {text!r}") from e
    return ranges


def read_config_file(path: str) -> Dict[str, str]:
    """key=value lines; `#` starts a comment; keys may use dashes or underscores."""
    values = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected key=value, got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


_NOT_CONFIGURABLE = {"help", "command", "config"}


def _subparsers(parser: argparse.ArgumentParser) -> List[argparse.ArgumentParser]:
    return [
        sub
        for action in parser._actions
        if isinstance(action, argparse._SubParsersAction)
        for sub in action.choices.values()
    ]


def _flag_actions(parser: argparse.ArgumentParser) -> List[argparse.Action]:
    return [
        action
        for action in parser._actions
        if not isinstance(action, (argparse._SubParsersAction, argparse._HelpAction))
        and action.dest not in _NOT_CONFIGURABLE
    ]


def _config_defaults(
    parser: argparse.ArgumentParser, values: Dict[str, str]
) -> Dict[str, object]:
    defaults: Dict[str, object] = {}
    for action in _flag_actions(parser):
        if action.dest not in values:
            continue
        raw = values[action.dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in _TRUE | _FALSE:
                raise ValueError(f"config key {action.dest}: expected a boolean")
            defaults[action.dest] = raw.lower() in _TRUE
        else:
            defaults[action.dest] = raw
    return defaults


def apply_config_defaults(parser: argparse.ArgumentParser, values: Dict[str, str]) -> None:
    """Install config-file values as defaults of the global and subcommand flags.

    A key no flag accepts is a usage error (exit 2), like an unknown flag.
    """
    parsers = [parser, *_subparsers(parser)]
    known = {action.dest for p in parsers for action in _flag_actions(p)}
    unknown = sorted(set(values) - known)
    if unknown:
        parser.error(f"unknown config key(s): {', '.join(unknown)}")
    for p in parsers:
        p.set_defaults(**_config_defaults(p, values))


def open_output(target: Optional[str]) -> TextIO:
    if target in (None, "-"):
        return sys.stdout
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    return open(target, "w", encoding="utf-8")


def emit(text: str, target: Optional[str] = None) -> None:
    out = open_output(target)
    try:
        out.write(text.rstrip("\n") + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def emit_json(records: Sequence, target: Optional[str]) -> None:
    emit("\n".join(r.model_dump_json() for r in records), target)


def resolve_images(paths: Sequence[str]) -> List[Path]:
    """Files as given; directories expand to their images in sorted path order."""
    resolved: List[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            resolved += list_images(p)
        elif p.suffix.lower() in IMAGE_SUFFIXES or p.exists():
            resolved.append(p)
        else:
            raise FileNotFoundError(f"No such image: {p}")
    return resolved


def build_dataset(args: argparse.Namespace, split: str = "val") -> DatasetRepository:
    """--data manifest, else --list (+ --labels), else a synthetic shapes set."""
    if getattr(args, "data", None):
        manifest = load_split_manifest(args.data)
        list_file = {"train": manifest.train, "test": manifest.test, "val": manifest.val}[split]
        return ListFileDataset(
            list_file, args.labels, manifest.classes, args.threads, progress=args.verbose
        )
    if getattr(args, "list", None):
        return ListFileDataset(
            args.list, args.labels, len(CLASS_NAMES), args.threads, progress=args.verbose
        )
    return SyntheticShapesDataset(
        count=args.synthetic,
        width=args.width,
        height=args.height,
        seed=args.seed if split == "train" else args.seed + 1,
    )


def add_dataset_flags(p: argparse.ArgumentParser, synthetic: int = 50) -> None:
    p.add_argument("--list", help="Image list file (one path per line)")
    p.add_argument("--labels", help="Label directory (default: labels next to images)")
    p.add_argument("--data", help="Darknet .data split manifest")
    p.add_argument(
        "--synthetic",
        type=positive_int,
        default=synthetic,
        help="Synthetic shapes sample count when no list is given",
    )
    p.add_argument("--width", type=positive_int, default=64, help="Synthetic image width")
    p.add_argument("--height", type=positive_int, default=64, help="Synthetic image height")


def add_model_flags(p: argparse.ArgumentParser, weights: bool = True) -> None:
    p.add_argument("--cfg", required=True, help="Network description path or bundled name")
    if weights:
        p.add_argument("--weights", required=True, help="Weights file")


def add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", type=int, choices=range(1, 7), help="Start from a scheme preset")
    p.add_argument("--network", help="Network description path or bundled name")
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--lr-step-every", type=positive_int)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--mosaic", action="store_true", default=None)
    p.add_argument("--augment", action="store_true", help="Enable the seeded image transforms")
    p.add_argument("--init", choices=[m.value for m in InitMode])
    p.add_argument("--freeze", choices=[m.value for m in FreezeMode])
    p.add_argument("--freeze-ranges", type=parse_ranges, help='Explicit ranges, e.g. "0-6,13-16"')
    p.add_argument(
        "--sparsity",
        type=float,
        nargs="?",
        const=settings.sparsity_lambda,
        help="L1 coefficient on prunable BN gammas (bare flag: SLIMDET_SPARSITY_LAMBDA)",
    )
    p.add_argument("--out-weights", help="Where to write the trained weights")
    p.add_argument("--history", help="Write per-epoch records as JSON lines ('-' for stdout)")
    add_dataset_flags(p)


def train_config(args: argparse.Namespace, **forced) -> TrainConfig:
    """Scheme preset (or defaults) overridden by every flag that was set."""
    values = {
        "network": args.network,
        "epochs": args.epochs,
        "base_lr": args.base_lr,
        "lr_step_every": args.lr_step_every,
        "lr_decay": args.lr_decay,
        "batch_size": args.batch_size,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "grad_clip": args.grad_clip,
        "mosaic": args.mosaic,
        "init": InitMode(args.init) if args.init else None,
        "weights_path": args.weights,
        "freeze": FreezeMode(args.freeze) if args.freeze else None,
        "freeze_ranges": args.freeze_ranges,
        "sparsity": SparsityConfig(lam=args.sparsity) if args.sparsity is not None else None,
        "seed": args.seed,
        "ignore_iou": settings.ignore_iou,
    }
    if args.augment:
        values["augment"] = AugmentConfig(
            mosaic_min=settings.mosaic_min,
            mosaic_max=settings.mosaic_max,
            mosaic_min_area=settings.mosaic_min_area,
        )
    values.update(forced)
    overrides = {k: v for k, v in values.items() if v is not None}
    if args.scheme:
        return TrainConfig.scheme(args.scheme, **overrides)
    return TrainConfig(**overrides)


# Subcommands


def cmd_inspect(args: argparse.Namespace) -> int:
    result = InspectModelUseCase(FileModelRepository()).execute(args.cfg)
    if result.issues:
        emit(render_issues(result.issues), args.report)
        return EXIT_INVALID
    emit(render_layers(result.rows, result.total_params), args.report)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    issues = ValidateModelUseCase(FileModelRepository()).execute(args.cfg, args.weights)
    emit(render_issues(issues))
    if any(isinstance(e, WeightsError) for e in issues):
        return EXIT_WEIGHTS
    return EXIT_INVALID if issues else EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    results = InferUseCase(FileModelRepository()).execute(
        args.cfg,
        args.weights,
        resolve_images(args.images),
        conf_thresh=args.conf,
        iou_thresh=args.iou,
        threads=args.threads,
        conv_method=args.conv_method,
        annotate_dir=Path(args.annotate) if args.annotate else None,
        dump_heads_dir=Path(args.dump_heads) if args.dump_heads else None,
    )
    records = [
        DetectionDTO.from_detection(r.image_id, d) for r in results for d in r.detections
    ]
    emit("\n".join(rec.to_line() for rec in records))
    if args.out:
        emit_json(records, args.out)
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    if args.sweep:
        return run_sweep(args, args.sweep)
    report = PruneUseCase(FileModelRepository()).execute(
        args.cfg,
        args.weights,
        args.ratio,
        args.out_cfg,
        args.out_weights,
        floor=args.floor,
        floor_fraction=settings.prune_floor_fraction,
        beta_warn=settings.beta_warn,
    )
    if args.format == "json":
        emit_json([PruneReportDTO.from_report(report)], args.report)
    else:
        emit(render_prune(report), args.report)
    return EXIT_OK


def run_sweep(args: argparse.Namespace, ratios: List[float]) -> int:
    tune = None
    if getattr(args, "fine_tune_epochs", 0):
        tune = TrainConfig(epochs=args.fine_tune_epochs, seed=args.seed)
    rows = SweepUseCase(FileModelRepository(), build_dataset(args)).execute(
        args.cfg,
        args.weights,
        ratios,
        bench_count=args.n,
        warmup=args.warmup,
        eval_conf=settings.eval_conf_thresh,
        conf_thresh=settings.conf_thresh,
        iou_thresh=settings.iou_thresh,
        map_tolerance=settings.efficiency_map_tolerance,
        floor=args.floor,
        floor_fraction=settings.prune_floor_fraction,
        beta_warn=settings.beta_warn,
        fine_tune_config=tune,
        tune_dataset=build_dataset(args, "train") if tune else None,
        threads=args.threads,
        progress=args.verbose,
    )
    if args.format == "json":
        emit_json([SweepRowDTO.from_row(r) for r in rows], args.report)
    else:
        emit(render_sweep(rows), args.report)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    return run_sweep(args, args.ratios)


def write_history(records, target: Optional[str]) -> None:
    if target:
        emit_json([EpochRecordDTO.from_record(r) for r in records], target)


def cmd_train(args: argparse.Namespace) -> int:
    config = train_config(args)
    _, _, history = TrainUseCase(FileModelRepository(), build_dataset(args, "train")).execute(
        config, args.out_weights, threads=args.threads, progress=args.verbose
    )
    write_history(history.records, args.history)
    return EXIT_OK


def cmd_fine_tune(args: argparse.Namespace) -> int:
    config = train_config(args, network=args.cfg, init=InitMode.SCRATCH)
    eval_dataset = build_dataset(args, "val") if args.evaluate else None
    _, history = FineTuneUseCase(FileModelRepository(), build_dataset(args, "train")).execute(
        args.cfg,
        args.weights,
        config,
        args.out_weights,
        threads=args.threads,
        progress=args.verbose,
        eval_dataset=eval_dataset,
    )
    write_history(history.records, args.history)
    if history.final_map is not None:
        emit(f"fine-tuned mAP: {history.final_map:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    result = EvaluateUseCase(FileModelRepository(), build_dataset(args)).execute(
        args.cfg,
        args.weights,
        iou_thresh=args.iou,
        conf_thresh=args.conf,
        nms_iou=settings.iou_thresh,
        interp=args.ap_interp,
        threads=args.threads,
    )
    if args.format == "json":
        emit_json([EvalResultDTO.from_result(result, list(CLASS_NAMES))], args.report)
    else:
        emit(render_eval(result), args.report)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    report = BenchmarkUseCase(FileModelRepository(), build_dataset(args)).execute(
        args.cfg,
        args.weights,
        count=args.n,
        warmup=args.warmup,
        conf_thresh=settings.conf_thresh,
        iou_thresh=settings.iou_thresh,
        threads=args.threads,
        conv_method=args.conv_method,
    )
    if args.format == "json":
        emit_json([FpsReportDTO.from_report(report)], args.report)
    else:
        emit(render_fps(report), args.report)
    return EXIT_OK


def cmd_augment_preview(args: argparse.Namespace) -> int:
    base = AugmentConfig() if args.transforms else AugmentConfig.identity()
    config = base.model_copy(
        update={
            "mosaic_min": settings.mosaic_min,
            "mosaic_max": settings.mosaic_max,
            "mosaic_min_area": settings.mosaic_min_area,
        }
    )
    sample = AugmentPreviewUseCase(build_dataset(args, "train")).execute(
        Path(args.out), args.seed, args.net_width, args.net_height, config
    )
    emit(f"{args.out}/mosaic.png: {len(sample.gts)} boxes")
    return EXIT_OK


# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimdet", description="Pruning-aware YOLO toolkit: inspect, train, prune, evaluate."
    )
    parser.add_argument("--seed", type=int, default=settings.seed, help="Global seed")
    parser.add_argument(
        "--threads",
        type=positive_int,
        default=settings.threads,
        help="Worker threads for convolution and evaluation (env SLIMDET_THREADS)",
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging and progress bars")
    parser.add_argument("--config", help="key=value file supplying flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    def report_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--report", help="Write the report to FILE ('-' for stdout)")
        p.add_argument("--format", choices=("table", "json"), default="table")

    p = sub.add_parser("inspect", help="Per-layer shapes, parameters and prunability")
    add_model_flags(p, weights=False)
    p.add_argument("--report", help="Write the table to FILE ('-' for stdout)")
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("validate", help="Check a description (and weights) for errors")
    add_model_flags(p, weights=False)
    p.add_argument("--weights", help="Also check this weights file")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("infer", help="Detect objects in images")
    add_model_flags(p)
    p.add_argument("images", nargs="+", help="Image files or directories")
    p.add_argument("--conf", type=float, default=settings.conf_thresh)
    p.add_argument("--iou", type=float, default=settings.iou_thresh)
    p.add_argument("--out", help="Also write detections as JSON lines to FILE")
    p.add_argument("--annotate", help="Directory for annotated PNGs")
    p.add_argument("--dump-heads", help="Directory for raw yolo-input tensors (FTSR)")
    p.add_argument("--conv-method", choices=("reference", "gemm"), default=settings.conv_method)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("prune", help="Channel-prune a model by BN gamma magnitude")
    add_model_flags(p)
    p.add_argument("--ratio", type=float, default=0.5, help="Fraction of prunable channels")
    p.add_argument("--floor", type=positive_int, default=settings.prune_floor)
    p.add_argument("--out-cfg")
    p.add_argument("--out-weights")
    p.add_argument("--sweep", type=parse_ratios, help='Run a sweep instead, e.g. "0.1:0.9:0.1"')
    p.add_argument("--n", type=positive_int, default=settings.bench_images)
    p.add_argument("--warmup", type=int, default=settings.bench_warmup)
    add_dataset_flags(p)
    report_flags(p)
    p.set_defaults(handler=cmd_prune)

    p = sub.add_parser("sweep", help="Prune at several ratios and tabulate mAP, FPS, params")
    add_model_flags(p)
    p.add_argument("--ratios", type=parse_ratios, required=True, help='"0.2,0.5" or "0.1:0.9:0.1"')
    p.add_argument("--fine-tune-epochs", type=int, default=0)
    p.add_argument("--floor", type=positive_int, default=settings.prune_floor)
    p.add_argument("--n", type=positive_int, default=settings.bench_images)
    p.add_argument("--warmup", type=int, default=settings.bench_warmup)
    add_dataset_flags(p)
    report_flags(p)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("train-toy", help="Toy-scale training (scratch or pretrained)")
    add_training_flags(p)
    p.add_argument("--weights", help="Pretrained weights for init=weights")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("fine-tune", help="Fine-tune a pruned model")
    add_model_flags(p)
    add_training_flags(p)
    p.add_argument("--evaluate", action="store_true", help="Report mAP after fine-tuning")
    p.set_defaults(handler=cmd_fine_tune)

    p = sub.add_parser("eval", help="Per-class AP and mAP on an annotated set")
    add_model_flags(p)
    add_dataset_flags(p)
    p.add_argument("--iou", type=float, default=settings.map_iou_thresh)
    p.add_argument("--conf", type=float, default=settings.eval_conf_thresh)
    p.add_argument("--ap-interp", choices=("all", "voc11"), default=settings.ap_interp)
    report_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="Time the full detection pipeline")
    add_model_flags(p)
    add_dataset_flags(p, synthetic=8)
    p.add_argument("--n", type=positive_int, default=settings.bench_images)
    p.add_argument("--warmup", type=int, default=settings.bench_warmup)
    p.add_argument("--conv-method", choices=("reference", "gemm"), default=settings.conv_method)
    report_flags(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("augment-preview", help="Write one mosaic with remapped labels")
    add_dataset_flags(p, synthetic=4)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--net-width", type=positive_int, default=416)
    p.add_argument("--net-height", type=positive_int, default=416)
    p.add_argument("--transforms", action="store_true", help="Also apply the basic transforms")
    p.set_defaults(handler=cmd_augment_preview)
    return parser


def exit_code(error: BaseException) -> int:
    """Map an exception to the documented process exit code."""
    if isinstance(error, WeightsError):
        return EXIT_WEIGHTS
    if isinstance(error, MissingLabel):
        return EXIT_IO
    if isinstance(error, DatasetError) and not isinstance(error, ValueError):
        return EXIT_IO
    if isinstance(error, OSError):
        return EXIT_IO
    if isinstance(error, (ValueError, ValidationError)):
        return EXIT_INVALID
    return EXIT_UNEXPECTED


def main(
    argv: Optional[Sequence[str]] = None,
    setup: Optional[Callable[[bool], None]] = None,
) -> int:
    """
    Parse arguments and run one subcommand.

    Args:
        argv: Arguments without the program name (default sys.argv[1:])
        setup: Called with the verbose flag before running, to configure logging

    Returns:
        Process exit code
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            apply_config_defaults(parser, read_config_file(known.config))
        except OSError as e:
            print(f"slimdet: cannot read config: {e}", file=sys.stderr)
            return EXIT_IO
        except ValueError as e:
            print(f"slimdet: {e}", file=sys.stderr)
            return EXIT_INVALID
    args = parser.parse_args(argv)
    if setup is not None:
        setup(args.verbose)

    try:
        return args.handler(args)
    except (SlimdetError, OSError, ValueError, ValidationError) as e:
        code = exit_code(e)
        logger.error(f"{type(e).__name__}: {e}")
        if isinstance(e, WeightsError) and hasattr(e, "expected"):
            logger.error(f"expected {e.expected} floats, found {e.actual}")
        return code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_UNEXPECTED
