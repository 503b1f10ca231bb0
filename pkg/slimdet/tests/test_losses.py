"""
Tests for CIoU, confidence/class BCE, target assignment and the total loss.
"""
import math

import numpy as np
import pytest

from slimdet.domain.configs import LossWeights
from slimdet.domain.entities import Box, GroundTruth
from slimdet.domain.errors import DegenerateGt
from slimdet.domain.losses import (
    LossInputs,
    assign_targets,
    ciou_arrays,
    ciou_loss,
    class_loss,
    head_geometries,
    head_loss,
    noobj_conf_loss,
    obj_conf_loss,
    sparsity_penalty,
    total_loss,
)

# GT shaped exactly like toy anchor 1 of head 12, centred in cell (row 4, col 2)
GT_ANCHOR1 = GroundTruth(class_id=2, box=Box(0.3, 0.6, 30 / 64, 22 / 64))


class TestCiou:
    def test_offset_squares(self):
        terms = ciou_loss(Box(0, 0, 2, 2), Box(1, 1, 2, 2))
        assert terms.iou == pytest.approx(1 / 7)
        assert terms.rho2 == pytest.approx(2.0)
        assert terms.c2 == pytest.approx(18.0)
        assert terms.v == pytest.approx(0.0)
        assert terms.loss == pytest.approx(0.968254, abs=1e-6)

    def test_identical_boxes(self):
        terms = ciou_loss(Box(0.4, 0.4, 0.2, 0.3), Box(0.4, 0.4, 0.2, 0.3))
        assert terms.loss == pytest.approx(0.0, abs=1e-12)
        assert terms.iou == pytest.approx(1.0)

    def test_degenerate_gt(self):
        with pytest.raises(DegenerateGt):
            ciou_loss(Box(0.5, 0.5, 0.1, 0.1), Box(0.5, 0.5, 0.0, 0.1))

    def test_gradient_matches_finite_differences(self):
        pred = np.array([0.5, 0.5, 0.3, 0.2])
        gt = np.array([0.55, 0.48, 0.25, 0.3])
        base = ciou_arrays(pred, gt)
        alpha = base["alpha"][0]

        def fixed_alpha_loss(p):
            t = ciou_arrays(p, gt)
            return 1.0 - t["iou"][0] + t["rho2"][0] / t["c2"][0] + alpha * t["v"][0]

        h = 1e-6
        for k in range(4):
            step = np.zeros(4)
            step[k] = h
            numeric = (fixed_alpha_loss(pred + step) - fixed_alpha_loss(pred - step)) / (2 * h)
            assert base["grad"][0, k] == pytest.approx(numeric, rel=1e-5, abs=1e-7)


class TestBce:
    def single_cell(self, obj=True):
        mask = np.array([[[obj]]])
        return LossInputs(
            obj_mask=mask,
            noobj_mask=~mask,
            pred_conf=np.full((1, 1, 1), 0.5),
            target_conf=mask.astype(float),
            pred_class=np.full((1, 1, 1, 3), 0.5),
            target_class=np.array([[[[0.0, 1.0, 0.0]]]]),
        )

    def test_half_probability(self):
        inputs = self.single_cell()
        assert obj_conf_loss(inputs) == pytest.approx(math.log(2))
        assert noobj_conf_loss(inputs) == 0.0
        assert class_loss(inputs) == pytest.approx(3 * math.log(2))

    def test_noobj_slot(self):
        inputs = self.single_cell(obj=False)
        assert obj_conf_loss(inputs) == 0.0
        assert noobj_conf_loss(inputs) == pytest.approx(math.log(2))
        assert class_loss(inputs) == 0.0

    def test_extreme_probabilities_are_finite(self):
        inputs = self.single_cell()
        inputs.pred_conf = np.zeros((1, 1, 1))
        assert np.isfinite(obj_conf_loss(inputs))

    def test_overlapping_masks_rejected(self):
        mask = np.ones((1, 1, 1), dtype=bool)
        with pytest.raises(ValueError):
            LossInputs(
                mask, mask, np.zeros((1, 1, 1)), np.ones((1, 1, 1)),
                np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)),
            )


class TestAssignment:
    def test_best_anchor_at_center_cell(self, toy_net):
        head = head_geometries(toy_net)[12]
        targets = assign_targets([GT_ANCHOR1], head, (64, 64))
        assert targets.slots() == [(1, 4, 2)]
        assert targets.obj_mask.sum() == 1
        assert targets.noobj_mask.sum() == 3 * 64 - 1
        np.testing.assert_array_equal(targets.target_class[1, 4, 2], [0.0, 0.0, 1.0])

    def test_ignore_threshold_removes_close_anchors(self, toy_net):
        head = head_geometries(toy_net)[12]
        targets = assign_targets([GT_ANCHOR1], head, (64, 64), ignore_iou=0.5)
        assert targets.noobj_mask.sum() == 3 * 64 - 3
        assert not targets.noobj_mask[:, 4, 2].any()

    def test_colliding_gt_takes_next_best_anchor(self, toy_net):
        head = head_geometries(toy_net)[12]
        other = GroundTruth(class_id=0, box=Box(0.31, 0.61, 30 / 64, 22 / 64))
        targets = assign_targets([GT_ANCHOR1, other], head, (64, 64))
        # anchor 0 (20x20) is the runner-up for a 30x22 box
        assert targets.slots() == [(0, 4, 2), (1, 4, 2)]
        assert targets.boxes[(1, 4, 2)] == GT_ANCHOR1.box
        assert targets.boxes[(0, 4, 2)] == other.box
        np.testing.assert_array_equal(targets.target_class[0, 4, 2], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(targets.target_class[1, 4, 2], [0.0, 0.0, 1.0])

    def test_every_gt_gets_a_slot_while_anchors_are_free(self, toy_net):
        head = head_geometries(toy_net)[12]
        gts = [
            GroundTruth(k, Box(0.3 + 0.01 * k, 0.6, 30 / 64, 22 / 64)) for k in range(3)
        ]
        targets = assign_targets(gts, head, (64, 64))
        assert targets.obj_mask.sum() == 3
        assert sorted(targets.boxes.values(), key=lambda b: b.cx) == [g.box for g in gts]

    def test_full_cell_overwrites_best_slot(self, toy_net):
        head = head_geometries(toy_net)[12]
        gts = [
            GroundTruth(k % 3, Box(0.3 + 0.01 * k, 0.6, 30 / 64, 22 / 64)) for k in range(4)
        ]
        targets = assign_targets(gts, head, (64, 64))
        assert targets.obj_mask.sum() == 3
        assert targets.boxes[(1, 4, 2)] == gts[3].box


class TestHeadLoss:
    def test_gradient_matches_finite_differences(self, toy_net):
        head = head_geometries(toy_net)[12]
        targets = assign_targets([GT_ANCHOR1], head, (64, 64))
        rng = np.random.default_rng(0)
        feature = rng.normal(0.0, 0.5, size=(24, 8, 8))
        # w/h logits at the assigned slot match the GT aspect exactly
        feature[8 + 2, 4, 2] = 0.0
        feature[8 + 3, 4, 2] = 0.0
        _, grad = head_loss(feature, targets, (64, 64))

        def loss_at(f):
            return head_loss(f, targets, (64, 64))[0].total

        points = [(ch, 4, 2) for ch in range(24)] + [(4, 0, 0), (13, 7, 1), (21, 3, 3)]
        h = 1e-6
        for point in points:
            up, down = feature.copy(), feature.copy()
            up[point] += h
            down[point] -= h
            numeric = (loss_at(up) - loss_at(down)) / (2 * h)
            assert grad[point] == pytest.approx(numeric, rel=1e-4, abs=1e-6), point

    def test_weights_scale_terms(self, toy_net):
        head = head_geometries(toy_net)[12]
        targets = assign_targets([GT_ANCHOR1], head, (64, 64))
        feature = np.zeros((24, 8, 8))
        plain, _ = head_loss(feature, targets, (64, 64))
        weighted, _ = head_loss(
            feature, targets, (64, 64), LossWeights(ciou=2.0, obj=0.0, noobj=1.0, cls=0.5)
        )
        assert weighted.ciou == pytest.approx(2 * plain.ciou)
        assert weighted.obj == 0.0
        assert weighted.noobj == pytest.approx(plain.noobj)
        assert weighted.cls == pytest.approx(0.5 * plain.cls)


def test_sparsity_penalty(toy_store):
    store = toy_store.copy()
    store.blocks[0].bn_gamma[:] = 0.0
    value, grads = sparsity_penalty(store, [0], 1e-3)
    assert value == 0.0
    assert not grads[0].any()

    store.blocks[0].bn_gamma[:] = -2.0
    value, grads = sparsity_penalty(store, [0, 11], 1e-3)
    assert value == pytest.approx(1e-3 * 2.0 * store.blocks[0].filters)
    np.testing.assert_allclose(grads[0], -1e-3, rtol=1e-6)
    assert 11 not in grads
    assert sparsity_penalty(store, [0], 0.0) == (0.0, {})


def test_total_loss_is_batch_mean_plus_sparsity(toy_net, toy_store):
    rng = np.random.default_rng(1)
    batch_heads = [
        {12: rng.normal(size=(24, 8, 8)), 19: rng.normal(size=(24, 16, 16))} for _ in range(2)
    ]
    batch_gts = [[GT_ANCHOR1], []]
    heads = head_geometries(toy_net)
    expected = 0.0
    for image_heads, gts in zip(batch_heads, batch_gts):
        for index, feature in image_heads.items():
            targets = assign_targets(gts, heads[index], (64, 64))
            expected += head_loss(feature, targets, (64, 64))[0].total
    penalty, _ = sparsity_penalty(toy_store, [0, 1], 1e-4)

    total, head_grads, gamma_grads = total_loss(
        batch_heads, batch_gts, toy_net, store=toy_store, sparsity_layers=[0, 1], lam=1e-4
    )
    assert total.total == pytest.approx(expected / 2 + penalty)
    assert total.sparsity == pytest.approx(penalty)
    assert len(head_grads) == 2 and set(head_grads[0]) == {12, 19}
    assert set(gamma_grads) == {0, 1}
    with pytest.raises(ValueError):
        total_loss(batch_heads, batch_gts[:1], toy_net)
