"""
Use cases of the slimdet toolkit.

Each use case receives its repositories through the constructor and exposes
a single `execute` method that the CLI calls.
"""
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from ..domain.configs import AugmentConfig, InitMode, TrainConfig
from ..domain.entities import (
    Detection,
    EvalResult,
    FpsReport,
    NetworkDef,
    PruneReport,
    Sample,
    SweepRow,
    TrainHistory,
    WeightStore,
)
from ..domain.errors import SlimdetError, WeightsError
from ..domain.graph import LayerRow, count_parameters, layer_table, validate
from ..domain.metrics import annotate_sweep, benchmark_fps, map50
from ..domain.prune import prune_model
from ..domain.repositories import DatasetRepository, ModelRepository
from ..domain.rng import derive_seed
from ..infrastructure import images
from ..infrastructure.augment import basic_transforms, mosaic
from ..infrastructure.datasets import write_labels
from ..infrastructure.netcfg import load_freeze_table
from ..infrastructure.tensor_io import write_tensor
from .pipeline import Detector
from .training import fine_tune, train_toy


@dataclass(frozen=True)
class InspectResult:
    net: NetworkDef
    rows: List[LayerRow]
    total_params: int
    issues: List[SlimdetError]


@dataclass(frozen=True)
class ImageDetections:
    image_id: str
    detections: List[Detection]


class InspectModelUseCase:
    """Use case for listing a network's layers, shapes and prunability."""

    def __init__(self, model_repo: ModelRepository) -> None:
        self.model_repo = model_repo

    def execute(self, cfg_path: str) -> InspectResult:
        logger.info(f"Inspecting network '{cfg_path}'")
        net = self.model_repo.load_network(cfg_path)
        issues = validate(net)
        rows = layer_table(net) if not issues else []
        total = count_parameters(net).total if not issues else 0
        logger.info(f"{len(net.layers)} layers, {total:,} parameters, {len(issues)} issues")
        return InspectResult(net=net, rows=rows, total_params=total, issues=issues)


class ValidateModelUseCase:
    """Use case for checking a description (and optionally weights) without running it."""

    def __init__(self, model_repo: ModelRepository) -> None:
        self.model_repo = model_repo

    def execute(self, cfg_path: str, weights_path: Optional[str] = None) -> List[SlimdetError]:
        """
        Collect every structural problem instead of stopping at the first.

        Returns:
            Errors found; empty when the model is valid
        """
        logger.info(f"Step 1: Validating network '{cfg_path}'")
        net = self.model_repo.load_network(cfg_path)
        issues = validate(net)
        if weights_path and not issues:
            logger.info(f"Step 2: Checking weights {weights_path}")
            try:
                self.model_repo.load_model(cfg_path, weights_path)
            except WeightsError as e:
                issues.append(e)
        for issue in issues:
            logger.warning(f"{type(issue).__name__}: {issue}")
        logger.info(f"Validation finished with {len(issues)} issues")
        return issues


class InferUseCase:
    """Use case for running detection over a set of images."""

    def __init__(self, model_repo: ModelRepository) -> None:
        self.model_repo = model_repo

    def execute(
        self,
        cfg_path: str,
        weights_path: str,
        image_paths: Sequence[Path],
        conf_thresh: float,
        iou_thresh: float,
        threads: int = 1,
        conv_method: str = "reference",
        annotate_dir: Optional[Path] = None,
        dump_heads_dir: Optional[Path] = None,
    ) -> List[ImageDetections]:
        """
        Detect objects in every image, in the given order.

        Args:
            annotate_dir: When set, class-coloured annotated PNGs are written here
            dump_heads_dir: When set, each yolo input tensor is written as an FTSR file

        Returns:
            One record set per image, boxes in the original image frame
        """
        logger.info(f"Step 1: Loading model {cfg_path} + {weights_path}")
        net, store = self.model_repo.load_model(cfg_path, weights_path)
        detector = Detector(net, store, conf_thresh, iou_thresh, threads, conv_method)

        logger.info(f"Step 2: Detecting in {len(image_paths)} images")
        results = []
        for path in image_paths:
            image = images.load_image(path)
            start = time.perf_counter()
            dets, features = detector.run(image)
            elapsed = (time.perf_counter() - start) * 1000
            logger.info(f"{path.name}: {len(dets)} detections in {elapsed:.1f}ms")
            if dump_heads_dir is not None:
                dump_heads_dir.mkdir(parents=True, exist_ok=True)
                for index, feature in features.items():
                    write_tensor(dump_heads_dir / f"{path.stem}.layer{index}.ftsr", feature)
            if annotate_dir is not None:
                images.save_image(
                    annotate_dir / f"{path.stem}.png", images.draw_annotations(image, dets)
                )
            results.append(ImageDetections(image_id=str(path), detections=dets))
        return results


class PruneUseCase:
    """Use case for gamma-driven channel pruning of a trained model."""

    def __init__(self, model_repo: ModelRepository) -> None:
        self.model_repo = model_repo

    def execute(
        self,
        cfg_path: str,
        weights_path: str,
        ratio: float,
        out_cfg: Optional[str] = None,
        out_weights: Optional[str] = None,
        floor: int = 1,
        floor_fraction: float = 0.05,
        beta_warn: float = 1e-3,
    ) -> PruneReport:
        logger.info(f"Step 1: Loading model {cfg_path} + {weights_path}")
        net, store = self.model_repo.load_model(cfg_path, weights_path)
        logger.info(f"Step 2: Pruning at ratio {ratio:.2f}")
        pruned_net, pruned_store, _, report = prune_model(
            net, store, ratio, floor, floor_fraction, beta_warn
        )
        if out_cfg and out_weights:
            logger.info("Step 3: Saving pruned model")
            self.model_repo.save_model(pruned_net, pruned_store, out_cfg, out_weights)
        return report


def evaluate_samples(
    detector: Detector,
    samples: Sequence[Sample],
    classes: int,
    iou_thresh: float = 0.5,
    interp: str = "all",
    threads: int = 1,
) -> EvalResult:
    """mAP of `detector` over samples whose boxes live in their original frames."""
    dets_by_image: Dict[str, List[Detection]] = {}
    gts_by_image = {}
    for sample in samples:
        dets_by_image[sample.source_id] = detector(sample.image)
        gts_by_image[sample.source_id] = sample.gts
    return map50(
        dets_by_image,
        gts_by_image,
        classes,
        iou_thresh=iou_thresh,
        conf_thresh=detector.conf_thresh,
        interp=interp,
        threads=threads,
    )


def bench_images(samples: Sequence[Sample], count: int) -> List[np.ndarray]:
    """`count` decoded images, cycling through the samples."""
    if not samples:
        raise ValueError("No images to benchmark")
    return [samples[k % len(samples)].image for k in range(count)]


class EvaluateUseCase:
    """Use case for per-class AP and mAP of a model on an annotated dataset."""

    def __init__(self, model_repo: ModelRepository, dataset: DatasetRepository) -> None:
        self.model_repo = model_repo
        self.dataset = dataset

    def execute(
        self,
        cfg_path: str,
        weights_path: str,
        iou_thresh: float = 0.5,
        conf_thresh: float = 0.005,
        nms_iou: float = 0.45,
        interp: str = "all",
        threads: int = 1,
    ) -> EvalResult:
        logger.info(f"Step 1: Loading model {cfg_path} + {weights_path}")
        net, store = self.model_repo.load_model(cfg_path, weights_path)
        logger.info(f"Step 2: Loading {self.dataset.describe()}")
        samples = self.dataset.load_samples()
        logger.info(f"Step 3: Evaluating {len(samples)} images at IoU {iou_thresh}")
        detector = Detector(net, store, conf_thresh, nms_iou, threads)
        classes = net.layers[net.yolo_indices()[0]].classes
        result = evaluate_samples(detector, samples, classes, iou_thresh, interp, threads)
        logger.info(f"mAP@{iou_thresh:g}: {result.map:.4f}")
        return result


class BenchmarkUseCase:
    """Use case for timing the full detection pipeline."""

    def __init__(self, model_repo: ModelRepository, dataset: DatasetRepository) -> None:
        self.model_repo = model_repo
        self.dataset = dataset

    def execute(
        self,
        cfg_path: str,
        weights_path: str,
        count: int = 20,
        warmup: int = 10,
        conf_thresh: float = 0.25,
        iou_thresh: float = 0.45,
        threads: int = 1,
        conv_method: str = "reference",
    ) -> FpsReport:
        net, store = self.model_repo.load_model(cfg_path, weights_path)
        detector = Detector(net, store, conf_thresh, iou_thresh, threads, conv_method)
        frames = bench_images(self.dataset.load_samples(), count + warmup)
        logger.info(f"Benchmarking {count} images after {warmup} warmup runs")
        return benchmark_fps(detector, frames, warmup)


class TrainUseCase:
    """Use case for toy-scale training from scratch or from pretrained weights."""

    def __init__(self, model_repo: ModelRepository, dataset: DatasetRepository) -> None:
        self.model_repo = model_repo
        self.dataset = dataset

    def execute(
        self,
        config: TrainConfig,
        out_weights: Optional[str] = None,
        out_cfg: Optional[str] = None,
        threads: int = 1,
        progress: bool = False,
    ) -> Tuple[NetworkDef, WeightStore, TrainHistory]:
        logger.info(f"Step 1: Loading network '{config.network}' ({config.init.value} init)")
        store: Optional[WeightStore] = None
        if config.init is InitMode.WEIGHTS:
            net, store = self.model_repo.load_model(config.network, config.weights_path)
        else:
            net = self.model_repo.load_network(config.network)
        logger.info(f"Step 2: Loading {self.dataset.describe()}")
        samples = self.dataset.load_samples()
        logger.info("Step 3: Training")
        trained, history = train_toy(
            net, config, samples, store, load_freeze_table(), threads, progress
        )
        if out_weights:
            self.model_repo.save_model(
                net, trained, out_cfg or str(Path(out_weights).with_suffix(".cfg")), out_weights
            )
        return net, trained, history


class FineTuneUseCase:
    """Use case for fine-tuning a pruned model."""

    def __init__(self, model_repo: ModelRepository, dataset: DatasetRepository) -> None:
        self.model_repo = model_repo
        self.dataset = dataset

    def execute(
        self,
        cfg_path: str,
        weights_path: str,
        config: TrainConfig,
        out_weights: Optional[str] = None,
        threads: int = 1,
        progress: bool = False,
        eval_dataset: Optional[DatasetRepository] = None,
    ) -> Tuple[WeightStore, TrainHistory]:
        logger.info(f"Step 1: Loading model {cfg_path} + {weights_path}")
        net, store = self.model_repo.load_model(cfg_path, weights_path)
        samples = self.dataset.load_samples()
        logger.info(f"Step 2: Fine-tuning on {len(samples)} samples")
        tuned, history = fine_tune(
            net, store, config, samples, load_freeze_table(), threads, progress
        )
        if eval_dataset is not None:
            logger.info("Step 3: Measuring recovered accuracy")
            classes = net.layers[net.yolo_indices()[0]].classes
            detector = Detector(net, tuned, conf_thresh=0.005, threads=threads)
            history.final_map = evaluate_samples(
                detector, eval_dataset.load_samples(), classes, threads=threads
            ).map
            logger.info(f"Fine-tuned mAP: {history.final_map:.4f}")
        if out_weights:
            self.model_repo.save_model(
                net, tuned, str(Path(out_weights).with_suffix(".cfg")), out_weights
            )
        return tuned, history


class SweepUseCase:
    """Use case for the prune-ratio sweep: prune, optionally fine-tune, evaluate, benchmark."""

    def __init__(self, model_repo: ModelRepository, dataset: DatasetRepository) -> None:
        self.model_repo = model_repo
        self.dataset = dataset

    def execute(
        self,
        cfg_path: str,
        weights_path: str,
        ratios: Sequence[float],
        bench_count: int = 20,
        warmup: int = 10,
        eval_conf: float = 0.005,
        conf_thresh: float = 0.25,
        iou_thresh: float = 0.45,
        map_tolerance: float = 0.02,
        floor: int = 1,
        floor_fraction: float = 0.05,
        beta_warn: float = 1e-3,
        fine_tune_config: Optional[TrainConfig] = None,
        tune_dataset: Optional[DatasetRepository] = None,
        threads: int = 1,
        progress: bool = False,
    ) -> List[SweepRow]:
        """
        One row per ratio, in the given order, annotated for best mAP,
        efficiency and excess boxes.

        Raises:
            ValueError: If `ratios` is empty
        """
        if not ratios:
            raise ValueError("Sweep needs at least one prune ratio")
        net, store = self.model_repo.load_model(cfg_path, weights_path)
        samples = self.dataset.load_samples()
        tune_samples = tune_dataset.load_samples() if tune_dataset is not None else samples
        frames = bench_images(samples, bench_count + warmup)
        classes = net.layers[net.yolo_indices()[0]].classes

        rows = []
        for ratio in ratios:
            logger.info(f"Sweep ratio {ratio:.2f}: pruning")
            pruned_net, pruned_store, _, report = prune_model(
                net, store, ratio, floor, floor_fraction, beta_warn
            )
            if fine_tune_config is not None and ratio > 0:
                logger.info(f"Sweep ratio {ratio:.2f}: fine-tuning")
                pruned_store, _ = fine_tune(
                    pruned_net,
                    pruned_store,
                    fine_tune_config,
                    tune_samples,
                    load_freeze_table(),
                    threads,
                    progress,
                )
            evaluator = Detector(pruned_net, pruned_store, eval_conf, iou_thresh, threads)
            result = evaluate_samples(evaluator, samples, classes, threads=threads)
            runner = Detector(pruned_net, pruned_store, conf_thresh, iou_thresh, threads)
            fps = benchmark_fps(runner, frames, warmup)
            rows.append(
                SweepRow(
                    ratio=ratio,
                    params=report.params_after,
                    map=result.map,
                    fps=fps.fps,
                    mean_detections=fps.mean_detections,
                )
            )
            logger.info(
                f"Sweep ratio {ratio:.2f}: mAP {result.map:.4f}, {fps.fps:.2f} FPS, "
                f"{report.params_after:,} parameters"
            )
        return annotate_sweep(rows, map_tolerance)


class AugmentPreviewUseCase:
    """Use case for writing one mosaic of four dataset samples with its labels."""

    def __init__(self, dataset: DatasetRepository) -> None:
        self.dataset = dataset

    def execute(
        self,
        out_dir: Path,
        seed: int,
        net_width: int,
        net_height: int,
        config: Optional[AugmentConfig] = None,
    ) -> Sample:
        config = config or AugmentConfig()
        samples = self.dataset.load_samples()
        if len(samples) < 4:
            raise ValueError(f"Mosaic preview needs 4 samples, dataset has {len(samples)}")
        parts = [
            basic_transforms(s, config, derive_seed(seed, s.source_id)) for s in samples[:4]
        ]
        composed = mosaic(parts, seed, net_width, net_height, config)
        out_dir.mkdir(parents=True, exist_ok=True)
        images.save_image(out_dir / "mosaic.png", composed.image)
        write_labels(out_dir / "mosaic.txt", composed.gts)
        images.save_image(
            out_dir / "mosaic_annotated.png",
            images.draw_annotations(composed.image, gts=composed.gts),
        )
        logger.info(f"Wrote mosaic preview with {len(composed.gts)} boxes to {out_dir}")
        return composed
