"""
Binary weights codec.

Layout: three little-endian int32 (major, minor, revision), a seen counter
(int64 from version 0.2 on, int32 before), then per convolutional layer in
file order either BN beta, gamma, mean, var or a bias (n floats each),
followed by the kernel (n*c*k*k floats). All floats are little-endian f32.
"""
from typing import Dict, Tuple

import numpy as np
from loguru import logger

from ..domain.entities import ConvBlock, ConvLayer, NetworkDef, WeightsHeader, WeightStore
from ..domain.errors import BadHeader, MisalignedStore, NegativeVariance, SizeMismatch
from ..domain.graph import conv_in_channels, count_parameters, infer_shapes

_FLOAT = np.dtype("<f4")
_VERSION = np.dtype("<i4")


def _read_header(data: bytes) -> Tuple[WeightsHeader, int]:
    if len(data) < 12:
        raise BadHeader(f"file has {len(data)} bytes, header needs at least 12")
    major, minor, revision = (int(v) for v in np.frombuffer(data, dtype=_VERSION, count=3))
    if major < 0 or minor < 0 or revision < 0:
        raise BadHeader(f"negative version {major}.{minor}.{revision}")
    version = WeightsHeader(major, minor, revision)
    seen_dtype = np.dtype("<u8") if version.wide_seen else np.dtype("<u4")
    end = 12 + seen_dtype.itemsize
    if len(data) < end:
        raise BadHeader(f"file ends inside the seen counter ({len(data)} bytes)")
    seen = int(np.frombuffer(data, dtype=seen_dtype, count=1, offset=12)[0])
    return WeightsHeader(major, minor, revision, seen), end


def header_bytes(header: WeightsHeader) -> bytes:
    seen_dtype = np.dtype("<u8") if header.wide_seen else np.dtype("<u4")
    version = np.array([header.major, header.minor, header.revision], dtype=_VERSION)
    return version.tobytes() + np.array([header.seen], dtype=seen_dtype).tobytes()


def load_weights(data: bytes, net: NetworkDef) -> WeightStore:
    """Distribute a weights file over the network's convolutional layers."""
    header, offset = _read_header(data)
    expected = count_parameters(net).total
    payload = len(data) - offset
    if payload % _FLOAT.itemsize:
        raise SizeMismatch(offset + expected * _FLOAT.itemsize, len(data), unit="bytes")
    if payload // _FLOAT.itemsize != expected:
        raise SizeMismatch(expected, payload // _FLOAT.itemsize)

    floats = np.frombuffer(data, dtype=_FLOAT, offset=offset).astype(np.float32)
    in_channels = conv_in_channels(net, infer_shapes(net))
    blocks: Dict[int, ConvBlock] = {}
    start = 0

    def take(count: int) -> np.ndarray:
        nonlocal start
        chunk = floats[start:start + count].copy()
        start += count
        return chunk

    for i in net.conv_indices():
        layer: ConvLayer = net.layers[i]
        n, k = layer.filters, layer.size
        if layer.batch_normalize:
            beta, gamma, mean, var = take(n), take(n), take(n), take(n)
            negative = np.flatnonzero(var < 0)
            if negative.size:
                raise NegativeVariance(int(negative[0]), float(var[negative[0]]))
            kernel = take(n * in_channels[i] * k * k).reshape(n, in_channels[i], k, k)
            blocks[i] = ConvBlock(
                kernel=kernel, bn_beta=beta, bn_gamma=gamma, bn_mean=mean, bn_var=var
            )
        else:
            bias = take(n)
            kernel = take(n * in_channels[i] * k * k).reshape(n, in_channels[i], k, k)
            blocks[i] = ConvBlock(kernel=kernel, bias=bias)

    logger.debug(
        f"Loaded {expected} floats for {len(blocks)} conv layers "
        f"(format {header.major}.{header.minor}.{header.revision}, seen={header.seen})"
    )
    return WeightStore(header=header, blocks=blocks)


def save_weights(store: WeightStore, net: NetworkDef) -> bytes:
    """Serialize a store; `load_weights(save_weights(s, net), net)` reproduces s bitwise."""
    in_channels = conv_in_channels(net, infer_shapes(net))
    extra = set(store.blocks) - set(in_channels)
    if extra:
        raise MisalignedStore(min(extra), "block for a layer that is not convolutional")

    parts = [header_bytes(store.header)]
    for i in net.conv_indices():
        layer: ConvLayer = net.layers[i]
        block = store.blocks.get(i)
        if block is None:
            raise MisalignedStore(i, "no parameter block")
        shape = (layer.filters, in_channels[i], layer.size, layer.size)
        if block.kernel.shape != shape:
            raise MisalignedStore(i, f"kernel shape {block.kernel.shape}, expected {shape}")
        if block.batch_normalize != layer.batch_normalize:
            raise MisalignedStore(i, "batch-norm flag differs from the network")
        if layer.batch_normalize:
            vectors = [block.bn_beta, block.bn_gamma, block.bn_mean, block.bn_var]
        else:
            vectors = [block.bias]
        for v in vectors:
            if v.shape != (layer.filters,):
                raise MisalignedStore(i, f"vector of shape {v.shape}, expected ({layer.filters},)")
            parts.append(np.ascontiguousarray(v, dtype=_FLOAT).tobytes())
        parts.append(np.ascontiguousarray(block.kernel, dtype=_FLOAT).tobytes())
    return b"".join(parts)


def read_weights_file(path: str, net: NetworkDef) -> WeightStore:
    with open(path, "rb") as f:
        return load_weights(f.read(), net)


def write_weights_file(path: str, store: WeightStore, net: NetworkDef) -> int:
    data = save_weights(store, net)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)
