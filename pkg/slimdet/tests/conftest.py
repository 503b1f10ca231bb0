"""
Shared fixtures: bundled networks, seeded weights and synthetic samples.
"""
import numpy as np
import pytest
from loguru import logger

from slimdet.application.training import init_store
from slimdet.domain.entities import NetworkDef, WeightStore
from slimdet.infrastructure.datasets import SyntheticShapesDataset
from slimdet.infrastructure.netcfg import load_bundled_cfg, parse_cfg

SMALL_CFG = """
[net]
width=8
height=8
channels=3

[convolutional]
batch_normalize=1
filters=4
size=3
stride=1
pad=1
activation=mish

[maxpool]
size=2
stride=2

[convolutional]
filters=5
size=1
stride=1
pad=1
activation=linear
"""


@pytest.fixture(scope="session")
def toy_net() -> NetworkDef:
    return load_bundled_cfg("toy")


@pytest.fixture(scope="session")
def yolov4_net() -> NetworkDef:
    return load_bundled_cfg("yolov4")


@pytest.fixture(scope="session")
def tiny_net() -> NetworkDef:
    return load_bundled_cfg("yolov4-tiny")


@pytest.fixture
def small_net() -> NetworkDef:
    """Conv(BN, mish) -> maxpool -> conv(bias): smooth enough for finite differences."""
    return parse_cfg(SMALL_CFG, source_name="small")


@pytest.fixture
def toy_store(toy_net) -> WeightStore:
    return init_store(toy_net, seed=7)


def as_float64(store: WeightStore) -> WeightStore:
    """Same parameters in double precision, for gradient checks."""
    out = store.copy()
    for block in out.blocks.values():
        for name in ("kernel", "bias", "bn_beta", "bn_gamma", "bn_mean", "bn_var"):
            value = getattr(block, name)
            if value is not None:
                setattr(block, name, value.astype(np.float64))
    return out


@pytest.fixture
def warnings_logged():
    """Messages of WARNING and above emitted while the test runs."""
    messages = []
    sink = logger.add(lambda m: messages.append(m.record["message"]), level="WARNING")
    yield messages
    logger.remove(sink)


@pytest.fixture(scope="session")
def shapes_samples():
    return SyntheticShapesDataset(count=8, seed=3).load_samples()
