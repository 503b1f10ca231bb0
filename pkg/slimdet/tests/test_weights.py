"""
Tests for the binary weights codec, the FTSR tensor format and the file repository.
"""
import numpy as np
import pytest

from slimdet.application.training import init_store
from slimdet.domain.entities import WeightsHeader
from slimdet.domain.errors import BadHeader, MisalignedStore, NegativeVariance, SizeMismatch
from slimdet.domain.graph import count_parameters
from slimdet.domain.prune import prune_model
from slimdet.infrastructure.model_repository import FileModelRepository
from slimdet.infrastructure.netcfg import parse_cfg
from slimdet.infrastructure.tensor_io import decode_tensor, encode_tensor, read_tensor, write_tensor
from slimdet.infrastructure.weights import header_bytes, load_weights, save_weights

ONE_CONV = """
[net]
width=8
height=8
channels=3

[convolutional]
batch_normalize=1
filters=8
size=3
pad=1
activation=leaky
"""


@pytest.fixture
def one_conv():
    return parse_cfg(ONE_CONV)


class TestWeights:
    def test_single_conv_float_count(self, one_conv):
        store = init_store(one_conv, seed=1)
        assert store.total_floats() == 8 * 4 + 8 * 3 * 3 * 3 == 248
        data = save_weights(store, one_conv)
        assert len(data) == 20 + 248 * 4

    def test_field_order(self, one_conv):
        store = init_store(one_conv, seed=1)
        floats = np.frombuffer(save_weights(store, one_conv)[20:], dtype="<f4")
        block = store.blocks[0]
        np.testing.assert_array_equal(floats[0:8], block.bn_beta)
        np.testing.assert_array_equal(floats[8:16], block.bn_gamma)
        np.testing.assert_array_equal(floats[16:24], block.bn_mean)
        np.testing.assert_array_equal(floats[24:32], block.bn_var)
        np.testing.assert_array_equal(floats[32:], block.kernel.ravel())

    def test_bitwise_round_trip(self, toy_net, toy_store):
        data = save_weights(toy_store, toy_net)
        assert save_weights(load_weights(data, toy_net), toy_net) == data
        assert (len(data) - 20) // 4 == count_parameters(toy_net).total

    def test_old_header_has_32_bit_seen(self, one_conv):
        store = init_store(one_conv, seed=1)
        store.header = WeightsHeader(major=0, minor=1, revision=0, seen=123)
        data = save_weights(store, one_conv)
        assert len(header_bytes(store.header)) == 16
        loaded = load_weights(data, one_conv)
        assert loaded.header.seen == 123
        assert not loaded.header.wide_seen

    def test_size_mismatch_reports_counts(self, one_conv):
        data = save_weights(init_store(one_conv, seed=1), one_conv)
        with pytest.raises(SizeMismatch) as exc:
            load_weights(data[:-8], one_conv)
        assert (exc.value.expected, exc.value.actual) == (248, 246)

    def test_truncated_header(self, one_conv):
        with pytest.raises(BadHeader):
            load_weights(b"\x00" * 10, one_conv)

    def test_negative_variance(self, one_conv):
        store = init_store(one_conv, seed=1)
        store.blocks[0].bn_var[3] = -1.0
        with pytest.raises(NegativeVariance):
            load_weights(save_weights(store, one_conv), one_conv)

    def test_misaligned_store(self, toy_net, toy_store):
        store = toy_store.copy()
        del store.blocks[5]
        with pytest.raises(MisalignedStore):
            save_weights(store, toy_net)

    def test_pruned_file_shrinks_by_removed_floats(self, toy_net, toy_store):
        pruned_net, pruned_store, _, _ = prune_model(toy_net, toy_store, 0.5)
        before = save_weights(toy_store, toy_net)
        after = save_weights(pruned_store, pruned_net)
        removed = toy_store.total_floats() - pruned_store.total_floats()
        assert removed > 0
        assert len(before) - len(after) == 4 * removed


class TestTensorFiles:
    def test_round_trip(self, tmp_path):
        x = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_tensor(tmp_path / "x.ftsr", x)
        np.testing.assert_array_equal(read_tensor(tmp_path / "x.ftsr"), x)

    def test_bad_magic(self):
        with pytest.raises(BadHeader):
            decode_tensor(b"NOPE" + encode_tensor(np.zeros(2))[4:])

    def test_truncated_payload(self):
        with pytest.raises(SizeMismatch):
            decode_tensor(encode_tensor(np.zeros((2, 2)))[:-4])


def test_repository_round_trip(tmp_path, toy_net, toy_store):
    repo = FileModelRepository()
    cfg, weights = tmp_path / "out" / "toy.cfg", tmp_path / "out" / "toy.weights"
    repo.save_model(toy_net, toy_store, str(cfg), str(weights))
    net, store = repo.load_model(str(cfg), str(weights))
    assert net.layers == toy_net.layers
    for i, block in toy_store.blocks.items():
        np.testing.assert_array_equal(store.blocks[i].kernel, block.kernel)
