"""
Tests for gamma-ranked channel selection and structural pruning.
"""
import numpy as np
import pytest

from slimdet.application.training import init_store
from slimdet.domain.engine import build_network
from slimdet.domain.entities import GammaScore, PruneMask
from slimdet.domain.errors import InconsistentMask, RatioOutOfRange
from slimdet.domain.graph import count_parameters, validate
from slimdet.domain.prune import (
    apply_mask,
    collect_gammas,
    layer_floor,
    prune_model,
    pruning_units,
    select_mask,
)
from slimdet.tests.conftest import as_float64


@pytest.fixture(scope="module")
def yolov4_store(yolov4_net):
    return init_store(yolov4_net, 11)


def unit_scores(layer, values):
    return [GammaScore(layer=layer, channel=c, score=v) for c, v in enumerate(values)]


class TestSelectMask:
    def test_quantile_threshold(self):
        mask = select_mask(unit_scores(0, [0.9, 0.01, 0.5, 0.02]), 0.5)
        assert mask.kept == {0: (0, 2)}
        assert mask.threshold == pytest.approx(0.5)
        assert mask.achieved_ratio == pytest.approx(0.5)

    def test_zero_ratio_keeps_everything(self):
        scores = unit_scores(0, [0.3, 0.1, 0.2]) + unit_scores(4, [0.05, 0.7])
        mask = select_mask(scores, 0.0)
        assert mask.kept == {0: (0, 1, 2), 4: (0, 1)}
        assert mask.achieved_ratio == 0.0

    def test_floor_refills_from_best_pruned(self):
        strong = unit_scores(0, [(c + 1) / 40 for c in range(40)])
        weak = unit_scores(1, [0.001] * 10)
        mask = select_mask(strong + weak, 0.9)
        assert mask.kept[0] == (35, 36, 37, 38, 39)
        assert mask.kept[1] == (0,)
        mask = select_mask(strong + weak, 0.9, floor=3)
        assert mask.kept[1] == (0, 1, 2)

    def test_floor_formula(self):
        assert layer_floor(40) == 2
        assert layer_floor(10) == 1
        assert layer_floor(10, floor=4) == 4
        assert layer_floor(3, floor=8) == 3

    @pytest.mark.parametrize("ratio", [1.0, -0.1, 1.5])
    def test_ratio_out_of_range(self, ratio):
        with pytest.raises(RatioOutOfRange):
            select_mask(unit_scores(0, [0.5, 0.2]), ratio)


class TestUnits:
    def test_toy_units(self, toy_net):
        units = pruning_units(toy_net)
        assert units[1] == (1, 3)
        assert 3 not in units
        assert 11 not in units and 18 not in units

    def test_group_scores_take_max(self, toy_net, toy_store):
        scores = collect_gammas(toy_net, toy_store)
        group = [s for s in scores if s.layer == 1]
        expected = np.maximum(
            np.abs(toy_store.blocks[1].bn_gamma), np.abs(toy_store.blocks[3].bn_gamma)
        )
        np.testing.assert_allclose([s.score for s in group], expected)


class TestApplyMask:
    def test_zeroed_channels_prune_without_changing_outputs(self, toy_net, toy_store):
        store = as_float64(toy_store)
        kept = {}
        for rep, members in pruning_units(toy_net).items():
            filters = toy_net.layers[rep].filters
            dropped = [0, 2]
            for m in members:
                store.blocks[m].bn_gamma[dropped] = 0.0
                store.blocks[m].bn_beta[dropped] = 0.0
            kept[rep] = tuple(c for c in range(filters) if c not in dropped)
        mask = PruneMask(kept=kept, ratio=0.1, threshold=0.0)
        pruned_net, pruned_store = apply_mask(toy_net, store, mask)

        x = np.random.default_rng(0).uniform(size=(3, 64, 64))
        before = build_network(toy_net, store).forward(x)
        after = build_network(pruned_net, pruned_store).forward(x)
        assert set(before) == set(after)
        for o in before:
            np.testing.assert_allclose(after[o], before[o], atol=1e-5)

    @pytest.mark.slow
    def test_yolov4_zeroed_channels_prune_without_changing_outputs(
        self, yolov4_net, yolov4_store
    ):
        net = yolov4_net.with_input_size(128, 128)
        store = as_float64(yolov4_store)
        kept = {}
        for rep, members in pruning_units(net).items():
            filters = net.layers[rep].filters
            dropped = list(range(0, filters, 3))
            for m in members:
                store.blocks[m].bn_gamma[dropped] = 0.0
                store.blocks[m].bn_beta[dropped] = 0.0
            kept[rep] = tuple(c for c in range(filters) if c not in dropped)
        pruned_net, pruned_store = apply_mask(
            net, store, PruneMask(kept=kept, ratio=1 / 3, threshold=0.0)
        )
        assert count_parameters(pruned_net).total < count_parameters(net).total

        x = np.random.default_rng(1).uniform(size=(5, 3, 128, 128))
        before = build_network(net, store, conv_method="gemm").forward(x)
        after = build_network(pruned_net, pruned_store, conv_method="gemm").forward(x)
        assert set(before) == set(after) == set(net.yolo_indices())
        for o in before:
            np.testing.assert_allclose(after[o], before[o], atol=1e-5)

    def test_differing_group_masks_rejected(self, toy_net, toy_store):
        mask = PruneMask(kept={1: (0, 1), 3: (0, 2)}, ratio=0.5, threshold=0.0)
        with pytest.raises(InconsistentMask):
            apply_mask(toy_net, toy_store, mask)

    def test_unprunable_layer_rejected(self, toy_net, toy_store):
        mask = PruneMask(kept={11: tuple(range(20))}, ratio=0.5, threshold=0.0)
        with pytest.raises(InconsistentMask):
            apply_mask(toy_net, toy_store, mask)


class TestPruneModel:
    def test_identity_at_zero_ratio(self, toy_net, toy_store):
        net, store, mask, report = prune_model(toy_net, toy_store, 0.0)
        assert net == toy_net
        assert report.param_fraction == 1.0
        for i, block in toy_store.blocks.items():
            np.testing.assert_array_equal(store.blocks[i].kernel, block.kernel)

    def test_pruned_model_is_consistent(self, toy_net, toy_store):
        net, store, mask, report = prune_model(toy_net, toy_store, 0.5)
        assert validate(net) == []
        assert net.layers[1].filters == net.layers[3].filters
        assert net.layers[11].filters == 24 and net.layers[18].filters == 24
        for i in net.conv_indices():
            assert store.blocks[i].filters == net.layers[i].filters
        assert 0.0 < report.param_fraction < 1.0
        assert report.params_after == count_parameters(net).total
        heads = build_network(net, store).forward(np.zeros((3, 64, 64), dtype=np.float32))
        assert heads[12].shape == (24, 8, 8) and heads[19].shape == (24, 16, 16)

    def test_parameters_shrink_with_ratio(self, toy_net, toy_store):
        fractions = [prune_model(toy_net, toy_store, r)[3].param_fraction for r in (0.2, 0.5, 0.8)]
        assert fractions[0] >= fractions[1] >= fractions[2] > 0.0

    @pytest.mark.parametrize("ratio", [0.2, 0.5, 0.9])
    def test_yolov4_parameter_envelope(self, yolov4_net, yolov4_store, ratio):
        report = prune_model(yolov4_net, yolov4_store, ratio)[3]
        assert (1 - ratio) ** 2 <= report.param_fraction <= 1 - ratio

    def test_report_rows(self, toy_net, toy_store):
        _, _, _, report = prune_model(toy_net, toy_store, 0.5)
        assert [row.layer for row in report.layers] == toy_net.conv_indices()
        for row in report.layers:
            assert 1 <= row.filters_after <= row.filters_before
            assert row.filters_before == toy_net.layers[row.layer].filters
