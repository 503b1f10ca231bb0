"""
Raw tensor files for golden tests and head dumps.

Layout: magic b"FTSR", u32 rank, u32 dims[rank], little-endian f32 payload.
"""
from pathlib import Path
from typing import Union

import numpy as np

from ..domain.errors import BadHeader, SizeMismatch

MAGIC = b"FTSR"
_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


def encode_tensor(x: np.ndarray) -> bytes:
    dims = np.array(x.shape, dtype=_U32)
    return (
        MAGIC
        + np.array([x.ndim], dtype=_U32).tobytes()
        + dims.tobytes()
        + np.ascontiguousarray(x, dtype=_F32).tobytes()
    )


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise BadHeader(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise BadHeader("missing rank")
    rank = int(np.frombuffer(data, dtype=_U32, count=1, offset=4)[0])
    header = 8 + 4 * rank
    if len(data) < header:
        raise BadHeader(f"file ends inside the {rank} dimensions")
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=_U32, count=rank, offset=8))
    expected = int(np.prod(dims)) if dims else 1
    actual = (len(data) - header) // _F32.itemsize
    if actual != expected or (len(data) - header) % _F32.itemsize:
        raise SizeMismatch(expected, actual)
    return np.frombuffer(data, dtype=_F32, offset=header).astype(np.float32).reshape(dims)


def write_tensor(path: Union[str, Path], x: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
