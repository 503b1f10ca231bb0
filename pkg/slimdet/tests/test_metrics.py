"""
Tests for detection matching, average precision, mAP and the FPS harness.
"""
import itertools
from dataclasses import replace

import numpy as np
import pytest

from slimdet.domain.entities import Box, Detection, GroundTruth, SweepRow
from slimdet.domain.metrics import (
    annotate_sweep,
    average_precision,
    benchmark_fps,
    map50,
    match_detections,
)

BOX = Box(0.5, 0.5, 0.2, 0.2)
FAR = Box(0.1, 0.1, 0.1, 0.1)


class TestAveragePrecision:
    def test_all_point_interpolation(self):
        assert average_precision([True, False, True], 2) == pytest.approx(0.8333, abs=1e-4)

    def test_voc11(self):
        ap = average_precision([True, False, True], 2, interp="voc11")
        assert ap == pytest.approx((6 + 5 * 2 / 3) / 11)

    def test_edges(self):
        assert average_precision([True, True], 2) == pytest.approx(1.0)
        assert average_precision([], 3) == 0.0
        assert average_precision([False, True], 0) is None
        assert average_precision([True], 4) == pytest.approx(0.25)


class TestMatching:
    def test_gt_matched_once(self):
        dets = [Detection(BOX, 0, 0.6), Detection(BOX, 0, 0.9)]
        assert match_detections(dets, [GroundTruth(0, BOX)]) == [True, False]

    def test_class_and_overlap_required(self):
        gts = [GroundTruth(0, BOX)]
        assert match_detections([Detection(BOX, 1, 0.9)], gts) == [False]
        assert match_detections([Detection(FAR, 0, 0.9)], gts) == [False]
        assert match_detections([Detection(BOX, 0, 0.9)], []) == [False]
        assert match_detections([], gts) == []

    def test_picks_highest_iou_gt(self):
        near = Box(0.52, 0.5, 0.2, 0.2)
        gts = [GroundTruth(0, near), GroundTruth(0, BOX)]
        dets = [Detection(BOX, 0, 0.9), Detection(near, 0, 0.8)]
        assert match_detections(dets, gts) == [True, True]


class TestMap:
    def dataset(self):
        dets = {
            "a": [Detection(BOX, 0, 0.9)],
            "b": [Detection(FAR, 0, 0.8), Detection(BOX, 0, 0.7), Detection(BOX, 1, 0.95)],
        }
        gts = {"a": [GroundTruth(0, BOX)], "b": [GroundTruth(0, BOX)]}
        return dets, gts

    def test_pooled_across_images(self):
        dets, gts = self.dataset()
        result = map50(dets, gts, classes=2)
        assert result.ap(0) == pytest.approx(0.8333, abs=1e-4)
        assert result.ap(1) is None
        assert result.map == pytest.approx(0.8333, abs=1e-4)
        stats = result.per_class[0]
        assert (stats.tp, stats.fp, stats.fn, stats.n_gt) == (2, 1, 0, 2)

    def test_threads_do_not_change_result(self):
        dets, gts = self.dataset()
        assert map50(dets, gts, 2, threads=3) == map50(dets, gts, 2)

    def test_confidence_filter(self):
        dets, gts = self.dataset()
        result = map50(dets, gts, 2, conf_thresh=0.75)
        assert result.ap(0) == pytest.approx(0.5)
        assert result.conf_thresh == 0.75

    def test_no_ground_truth_anywhere(self):
        result = map50({"a": [Detection(BOX, 0, 0.9)]}, {}, classes=1)
        assert result.map == 0.0
        assert result.ap(0) is None



def envelope_ap(flags, n_gt):
    """Each hit adds 1/n_gt times the best precision at its rank or later."""
    precisions, hits = [], 0
    for rank, hit in enumerate(flags, start=1):
        hits += hit
        precisions.append(hits / rank)
    return sum(max(precisions[k:]) for k, hit in enumerate(flags) if hit) / n_gt


def box_iou(a, b):
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def greedy_flags(dets, gts, iou_thresh=0.5):
    taken, flags = set(), []
    for det in sorted(dets, key=lambda d: -d.confidence):
        best, best_iou = None, -1.0
        for k, gt in enumerate(gts):
            if k in taken or gt.class_id != det.class_id:
                continue
            iou = box_iou(det.box, gt.box)
            if iou > best_iou:
                best, best_iou = k, iou
        if best is not None and best_iou >= iou_thresh:
            taken.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def jittered(rng, box, shift, scale):
    return Box(
        box.cx + rng.uniform(-shift, shift),
        box.cy + rng.uniform(-shift, shift),
        box.w * rng.uniform(*scale),
        box.h * rng.uniform(*scale),
    )


def grid_scene(rng, images=3):
    """One GT per cell of a 4x4 grid; detections never reach a neighbouring GT."""
    dets, gts = {}, {}
    for i in range(images):
        image_gts, image_dets = [], []
        for row, col in itertools.product(range(4), range(4)):
            if rng.uniform() < 0.5:
                continue
            box = Box(0.125 + 0.25 * col, 0.125 + 0.25 * row, *rng.uniform(0.1, 0.2, 2))
            image_gts.append(GroundTruth(0, box))
            for _ in range(rng.integers(0, 3)):
                scale = (0.5, 0.5) if rng.uniform() < 0.3 else (0.9, 1.1)
                image_dets.append(
                    Detection(jittered(rng, box, 0.01, scale), 0, float(rng.uniform()))
                )
        dets[f"img{i}"], gts[f"img{i}"] = image_dets, image_gts
    return dets, gts


class TestMetricProperties:
    def test_ap_matches_envelope_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            flags = [bool(f) for f in rng.uniform(size=rng.integers(0, 30)) < rng.uniform()]
            n_gt = max(1, sum(flags) + int(rng.integers(0, 4)))
            expected = envelope_ap(flags, n_gt) if flags else 0.0
            assert average_precision(flags, n_gt) == pytest.approx(expected, abs=1e-12)

    def test_matching_matches_greedy_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            gts = [
                GroundTruth(
                    int(rng.integers(0, 2)),
                    Box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2)),
                )
                for _ in range(rng.integers(0, 6))
            ]
            dets = []
            for _ in range(rng.integers(0, 10)):
                if gts and rng.uniform() < 0.7:
                    source = gts[int(rng.integers(0, len(gts)))]
                    box, cls = jittered(rng, source.box, 0.05, (0.7, 1.3)), source.class_id
                else:
                    box = Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.5, 2))
                    cls = int(rng.integers(0, 2))
                dets.append(Detection(box, cls, float(rng.uniform())))
            assert match_detections(dets, gts) == greedy_flags(dets, gts)

    def test_monotone_confidence_rescaling_keeps_ap(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            dets, gts = grid_scene(rng)
            squashed = {
                k: [replace(d, confidence=0.1 + 0.5 * d.confidence**3) for d in v]
                for k, v in dets.items()
            }
            assert map50(squashed, gts, 1).map == pytest.approx(map50(dets, gts, 1).map)

    def test_lower_scored_duplicate_never_raises_ap(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            dets, gts = grid_scene(rng)
            pool = [(k, d) for k, v in dets.items() for d in v]
            if not pool:
                continue
            image, det = pool[int(rng.integers(0, len(pool)))]
            copy = replace(det, confidence=det.confidence * float(rng.uniform()))
            doubled = {**dets, image: [*dets[image], copy]}
            assert map50(doubled, gts, 1).map <= map50(dets, gts, 1).map + 1e-12

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_identical_classes_average_to_single_class_ap(self, k):
        dets, gts = grid_scene(np.random.default_rng(4 + k))
        single = map50(dets, gts, 1).map

        def spread(items):
            return {
                image: [replace(x, class_id=c) for c in range(k) for x in v]
                for image, v in items.items()
            }

        result = map50(spread(dets), spread(gts), k)
        assert result.map == pytest.approx(single)
        for c in range(k):
            assert result.ap(c) == pytest.approx(single)


class TestBenchmark:
    def test_fake_clock(self):
        ticks = itertools.count(0.0, 0.1)
        calls = []

        def pipeline(image):
            calls.append(image)
            return [Detection(BOX, 0, 0.5)]

        images = [np.zeros((4, 4, 3), dtype=np.uint8)] * 13
        report = benchmark_fps(pipeline, images, warmup=3, clock=lambda: next(ticks))
        assert len(calls) == 13
        assert report.image_count == 10
        assert report.warmup_count == 3
        assert len(report.latencies) == 10
        assert report.wall_time == pytest.approx(1.0)
        assert report.fps == pytest.approx(10.0)
        assert report.detections_per_image == (1,) * 10

    def test_needs_ten_timed_images_after_warmup(self):
        frame = np.zeros((2, 2, 3))
        with pytest.raises(ValueError, match="at least 20"):
            benchmark_fps(lambda image: [], [frame] * 19, warmup=10)
        clock = itertools.count(0.0, 0.5).__next__
        report = benchmark_fps(lambda image: [], [frame] * 20, warmup=10, clock=clock)
        assert report.image_count == 10


def test_annotate_sweep():
    rows = [
        SweepRow(ratio=0.0, params=100, map=0.80, fps=10.0, mean_detections=5.0),
        SweepRow(ratio=0.3, params=70, map=0.79, fps=15.0, mean_detections=6.0),
        SweepRow(ratio=0.5, params=50, map=0.78, fps=20.0, mean_detections=8.0),
        SweepRow(ratio=0.7, params=30, map=0.60, fps=30.0, mean_detections=20.0),
    ]
    out = annotate_sweep(rows)
    assert [r.best_map for r in out] == [True, False, False, False]
    assert [r.most_efficient for r in out] == [False, False, True, False]
    assert [r.excess_boxes for r in out] == [False, False, False, True]
    assert annotate_sweep([]) == []
