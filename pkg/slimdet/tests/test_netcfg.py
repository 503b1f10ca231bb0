"""
Tests for network description parsing and serialization.
"""
import pytest

from slimdet.domain.entities import ConvLayer, RouteLayer, ShortcutLayer, YoloLayer
from slimdet.domain.errors import (
    BadReference,
    EmptyNetwork,
    MalformedSection,
    MissingRequiredKey,
    NetCfgError,
    UnknownLayerKind,
)
from slimdet.infrastructure.netcfg import (
    load_cfg,
    load_freeze_table,
    parse_cfg,
    resolve_cfg,
    serialize_cfg,
)

MINIMAL = """
[net]
width=32
height=32
channels=3

[convolutional]
filters=8
size=3
stride=1
pad=1
"""


class TestParse:
    def test_minimal_network(self):
        net = parse_cfg(MINIMAL)
        assert (net.input_width, net.input_height, net.input_channels) == (32, 32, 3)
        assert len(net) == 1
        layer = net.layers[0]
        assert isinstance(layer, ConvLayer)
        assert (layer.filters, layer.size, layer.stride, layer.padding) == (8, 3, 1, 1)

    def test_yolov4_heads(self, yolov4_net):
        yolo = yolov4_net.yolo_indices()
        assert len(yolo) == 3
        for i in yolo:
            assert isinstance(yolov4_net.layers[i], YoloLayer)
            assert yolov4_net.layers[i].classes == 3
            assert yolov4_net.layers[i - 1].filters == 24

    def test_relative_references_become_absolute(self, toy_net):
        shortcut = toy_net.layers[4]
        assert isinstance(shortcut, ShortcutLayer) and shortcut.source == 1
        assert toy_net.layers[9] == RouteLayer(sources=(8, 7))
        assert toy_net.layers[13].sources == (7,)
        assert toy_net.layers[16].sources == (15, 5)

    def test_unknown_keys_are_preserved(self):
        net = parse_cfg(MINIMAL + "flavour=mint\n")
        assert ("flavour", "mint") in net.layers[0].extra

    def test_unknown_net_keys_warn_and_survive(self, warnings_logged):
        net = parse_cfg(MINIMAL.replace("channels=3\n", "channels=3\nflavour=mint\nbatch=64\n"))
        assert ("flavour", "mint") in net.options
        assert ("batch", "64") in net.options
        assert any("'flavour' in [net]" in m for m in warnings_logged)
        assert not any("'batch'" in m for m in warnings_logged)

    def test_unknown_section(self):
        with pytest.raises(UnknownLayerKind) as exc:
            parse_cfg(MINIMAL + "\n[teleport]\nfrom=-1\n")
        assert exc.value.name == "teleport"

    def test_reference_past_the_start(self):
        with pytest.raises(BadReference):
            parse_cfg(MINIMAL + "\n[route]\nlayers=-5\n")

    def test_forward_reference(self):
        with pytest.raises(BadReference):
            parse_cfg(MINIMAL + "\n[route]\nlayers=3\n")

    def test_missing_required_key(self):
        with pytest.raises(MissingRequiredKey) as exc:
            parse_cfg("[net]\nwidth=32\nheight=32\n\n[convolutional]\nsize=3\n")
        assert exc.value.key == "filters"

    def test_first_section_must_be_net(self):
        with pytest.raises(MalformedSection):
            parse_cfg("[convolutional]\nfilters=8\n")

    def test_key_outside_section(self):
        with pytest.raises(MalformedSection):
            parse_cfg("width=32\n[net]\n")

    def test_even_kernel_is_rejected(self):
        with pytest.raises(NetCfgError):
            parse_cfg(MINIMAL.replace("size=3", "size=2"))

    def test_yolo_input_must_be_divisible_by_32(self, toy_net):
        text = serialize_cfg(toy_net).replace("width=64", "width=48", 1)
        with pytest.raises(NetCfgError):
            parse_cfg(text)


class TestSerialize:
    @pytest.mark.parametrize("name", ["toy", "yolov4-tiny", "yolov4"])
    def test_round_trip(self, name):
        net = resolve_cfg(name)
        again = parse_cfg(serialize_cfg(net), source_name=net.source_name)
        assert again == net

    def test_empty_network(self, toy_net):
        with pytest.raises(EmptyNetwork):
            serialize_cfg(toy_net.with_layers(()))

    def test_load_from_disk_uses_stem(self, tmp_path, toy_net):
        path = tmp_path / "mine.cfg"
        path.write_text(serialize_cfg(toy_net))
        net = load_cfg(str(path))
        assert net.source_name == "mine"
        assert net.layers == toy_net.layers


def test_freeze_table_covers_bundled_networks():
    table = load_freeze_table()
    assert table["toy"]["backbone"] == [(0, 6)]
    assert table["toy"]["backbone_neck"] == [(0, 9), (13, 16)]
    assert {"yolov4", "yolov4-tiny"} <= set(table)
