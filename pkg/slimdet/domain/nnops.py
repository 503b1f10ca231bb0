"""
Tensor kernels for inference and the toy training subset.

Tensors are numpy arrays in (n, c, h, w) layout; 3-D (c, h, w) inputs are
accepted by the forward kernels and returned in the same rank. Kernels keep
the input dtype: float32 for inference, float64 for gradient checks.

The reference convolution accumulates every output element in the fixed
order (kernel row, kernel column, input channel). Parallel workers split the
output channels, so each element is still computed by one worker with the
same serial order and results are bitwise independent of the thread count.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .entities import Activation
from .errors import ChannelMismatch, MissingCache, NegativeVariance, ShapeConflict

LEAKY_SLOPE = 0.1
DEFAULT_EPS = 1e-5


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"Expected a (c,h,w) or (n,c,h,w) tensor, got shape {x.shape}")
    return x, False


def _restore(x: np.ndarray, squeezed: bool) -> np.ndarray:
    return x[0] if squeezed else x


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    """Broadcast a per-channel vector against a tensor of rank `ndim`."""
    return v.reshape((-1, 1, 1)) if ndim == 3 else v.reshape((1, -1, 1, 1))


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        n = self.gamma.shape[0]
        for name in ("beta", "mean", "var"):
            if getattr(self, name).shape != (n,):
                raise ChannelMismatch(n, getattr(self, name).shape[0])
        if self.eps <= 0:
            raise ValueError("Batch-norm epsilon must be positive")
        negative = np.flatnonzero(self.var < 0)
        if negative.size:
            raise NegativeVariance(int(negative[0]), float(self.var[negative[0]]))

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    def inv_std(self, dtype) -> np.ndarray:
        return (1.0 / np.sqrt(self.var.astype(dtype) + dtype(self.eps))).astype(dtype)


# Convolution


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_reference(
    xp: np.ndarray, kernel: np.ndarray, stride: int, oh: int, ow: int
) -> np.ndarray:
    n = xp.shape[0]
    f, c, k, _ = kernel.shape
    out = np.zeros((n, f, oh, ow), dtype=xp.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for ky in range(k):
        for kx in range(k):
            for ch in range(c):
                window = xp[:, ch, ky:ky + hs:stride, kx:kx + ws:stride]
                out += kernel[:, ch, ky, kx].reshape(1, f, 1, 1) * window[:, None]
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + hs:stride, kx:kx + ws:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _conv_gemm(xp: np.ndarray, kernel: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    f, c, k, _ = kernel.shape
    cols = _im2col(xp, k, stride, oh, ow)
    out = np.matmul(kernel.reshape(f, c * k * k).astype(xp.dtype), cols)
    return out.reshape(xp.shape[0], f, oh, ow)


def _split_channels(filters: int, threads: int) -> List[Tuple[int, int]]:
    step = -(-filters // threads)
    return [(s, min(s + step, filters)) for s in range(0, filters, step)]


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    threads: int = 1,
    method: str = "reference",
) -> np.ndarray:
    """Cross-correlation of `x` with `kernel` (f, c, k, k); no kernel flip."""
    xb, squeezed = _as_batch(x)
    f, c, k, k2 = kernel.shape
    if xb.shape[1] != c:
        raise ChannelMismatch(c, xb.shape[1])
    if k != k2:
        raise ValueError("Only square kernels are supported")
    oh = _out_size(xb.shape[2], k, stride, pad)
    ow = _out_size(xb.shape[3], k, stride, pad)
    kernel = kernel.astype(xb.dtype, copy=False)
    xp = _pad(xb, pad)
    compute = _conv_gemm if method == "gemm" else _conv_reference

    if threads <= 1 or f == 1:
        return _restore(compute(xp, kernel, stride, oh, ow), squeezed)

    out = np.empty((xb.shape[0], f, oh, ow), dtype=xb.dtype)

    def run(span: Tuple[int, int]) -> None:
        lo, hi = span
        out[:, lo:hi] = compute(xp, kernel[lo:hi], stride, oh, ow)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, _split_channels(f, threads)))
    return _restore(out, squeezed)


def conv2d_backward(
    grad: np.ndarray,
    x: Optional[np.ndarray],
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the cached input and the kernel."""
    if x is None:
        raise MissingCache("convolution input")
    xb, squeezed = _as_batch(x)
    gb, _ = _as_batch(grad)
    f, c, k, _ = kernel.shape
    oh, ow = gb.shape[2], gb.shape[3]
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    xp = _pad(xb, pad)
    dxp = np.zeros_like(xp)
    dw = np.zeros(kernel.shape, dtype=xb.dtype)
    kernel = kernel.astype(xb.dtype, copy=False)
    for ky in range(k):
        for kx in range(k):
            window = xp[:, :, ky:ky + hs:stride, kx:kx + ws:stride]
            dw[:, :, ky, kx] = np.einsum("nfhw,nchw->fc", gb, window)
            dxp[:, :, ky:ky + hs:stride, kx:kx + ws:stride] += np.einsum(
                "fc,nfhw->nchw", kernel[:, :, ky, kx], gb
            )
    h, w = xb.shape[2], xb.shape[3]
    dx = dxp[:, :, pad:pad + h, pad:pad + w]
    return _restore(np.ascontiguousarray(dx), squeezed), dw


def bias_backward(grad: np.ndarray) -> np.ndarray:
    gb, _ = _as_batch(grad)
    return gb.sum(axis=(0, 2, 3))


def add_bias(x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if bias.shape[0] != x.shape[-3]:
        raise ChannelMismatch(x.shape[-3], bias.shape[0])
    return x + _channel_view(bias.astype(x.dtype, copy=False), x.ndim)


# Batch normalization (stored statistics only)


def batchnorm_forward(x: np.ndarray, p: BnParams) -> np.ndarray:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel."""
    if x.shape[-3] != p.channels:
        raise ChannelMismatch(p.channels, x.shape[-3])
    dt = x.dtype.type
    normalized = (x - _channel_view(p.mean.astype(dt), x.ndim)) * _channel_view(
        p.inv_std(dt), x.ndim
    )
    return _channel_view(p.gamma.astype(dt), x.ndim) * normalized + _channel_view(
        p.beta.astype(dt), x.ndim
    )


def batchnorm_backward(
    grad: np.ndarray, x: Optional[np.ndarray], p: BnParams
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgamma, dbeta) with mean and variance held fixed."""
    if x is None:
        raise MissingCache("batch-norm input")
    dt = x.dtype.type
    inv_std = _channel_view(p.inv_std(dt), x.ndim)
    normalized = (x - _channel_view(p.mean.astype(dt), x.ndim)) * inv_std
    axes = (0, 2, 3) if x.ndim == 4 else (1, 2)
    dgamma = (grad * normalized).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dx = grad * _channel_view(p.gamma.astype(dt), x.ndim) * inv_std
    return dx, dgamma, dbeta


def fold_batchnorm(
    kernel: np.ndarray, bias: Optional[np.ndarray], p: BnParams
) -> Tuple[np.ndarray, np.ndarray]:
    """Fold stored BN statistics into a kernel and bias."""
    if kernel.shape[0] != p.channels:
        raise ChannelMismatch(p.channels, kernel.shape[0])
    dt = np.float64
    scale = p.gamma.astype(dt) * p.inv_std(dt)
    base = np.zeros(p.channels, dtype=dt) if bias is None else bias.astype(dt)
    new_kernel = kernel.astype(dt) * scale.reshape(-1, 1, 1, 1)
    new_bias = (base - p.mean.astype(dt)) * scale + p.beta.astype(dt)
    return new_kernel.astype(kernel.dtype), new_bias.astype(kernel.dtype)


# Activations


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x.dtype.type(0), x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.exp(-np.logaddexp(x.dtype.type(0), -x))


def activation(x: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.LINEAR:
        return x
    if kind is Activation.LEAKY:
        return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE))
    if kind is Activation.MISH:
        return x * np.tanh(_softplus(x))
    if kind is Activation.SIGMOID:
        return sigmoid(x)
    raise ValueError(f"Unsupported activation {kind}")


def activation_backward(grad: np.ndarray, x: Optional[np.ndarray], kind: Activation) -> np.ndarray:
    """Gradient w.r.t. the activation input `x` (the cached pre-activation)."""
    if x is None:
        raise MissingCache(f"{kind.value} pre-activation")
    if kind is Activation.LINEAR:
        return grad
    if kind is Activation.LEAKY:
        return grad * np.where(x > 0, x.dtype.type(1), x.dtype.type(LEAKY_SLOPE))
    if kind is Activation.MISH:
        t = np.tanh(_softplus(x))
        return grad * (t + x * (1 - t * t) * sigmoid(x))
    if kind is Activation.SIGMOID:
        s = sigmoid(x)
        return grad * s * (1 - s)
    raise ValueError(f"Unsupported activation {kind}")


# Pooling, resampling and merging


def _pool_geometry(h: int, w: int, size: int, stride: int) -> Tuple[int, int, int, int, int]:
    oh, ow = (h - 1) // stride + 1, (w - 1) // stride + 1
    left = (size - 1) // 2
    bottom = max(0, (oh - 1) * stride + size - left - h)
    right = max(0, (ow - 1) * stride + size - left - w)
    return oh, ow, left, bottom, right


def maxpool_forward(
    x: np.ndarray, size: int, stride: int, return_indices: bool = False
):
    """Max over size x size windows; out = (H-1)//stride + 1 with -inf padding.

    With `return_indices` also returns the flat window offset of each winner,
    the cache maxpool_backward needs. The first maximum in row-major window
    order wins ties.
    """
    xb, squeezed = _as_batch(x)
    n, c, h, w = xb.shape
    oh, ow, left, bottom, right = _pool_geometry(h, w, size, stride)
    xp = np.pad(
        xb, ((0, 0), (0, 0), (left, bottom), (left, right)), constant_values=-np.inf
    )
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    out = np.full((n, c, oh, ow), -np.inf, dtype=xb.dtype)
    winner = np.zeros((n, c, oh, ow), dtype=np.int64)
    for ky in range(size):
        for kx in range(size):
            window = xp[:, :, ky:ky + hs:stride, kx:kx + ws:stride]
            better = window > out
            out = np.where(better, window, out)
            winner[better] = ky * size + kx
    out = _restore(out, squeezed)
    if return_indices:
        return out, _restore(winner, squeezed)
    return out


def maxpool_backward(
    grad: np.ndarray,
    indices: Optional[np.ndarray],
    input_shape: Sequence[int],
    size: int,
    stride: int,
) -> np.ndarray:
    """Route each output gradient to the input element that won its window."""
    if indices is None:
        raise MissingCache("maxpool winner indices")
    gb, squeezed = _as_batch(grad)
    ib, _ = _as_batch(indices)
    h, w = input_shape[-2], input_shape[-1]
    n, c, oh, ow = gb.shape
    _, _, left, bottom, right = _pool_geometry(h, w, size, stride)
    dxp = np.zeros((n, c, h + left + bottom, w + left + right), dtype=gb.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for ky in range(size):
        for kx in range(size):
            picked = np.where(ib == ky * size + kx, gb, gb.dtype.type(0))
            dxp[:, :, ky:ky + hs:stride, kx:kx + ws:stride] += picked
    return _restore(dxp[:, :, left:left + h, left:left + w].copy(), squeezed)


def upsample_forward(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour replication by an integer factor."""
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def upsample_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    *lead, h, w = grad.shape
    blocks = grad.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(-3, -1))


def route_concat(
    xs: Sequence[np.ndarray], groups: int = 1, group_id: int = 0, layer: int = -1
) -> np.ndarray:
    """Stack sources along channels in source order, optionally taking one channel group each."""
    if not xs:
        raise ValueError("Route needs at least one input")
    spatial = {x.shape[-2:] for x in xs}
    if len(spatial) > 1:
        raise ShapeConflict(layer, f"route inputs differ spatially: {sorted(spatial)}")
    parts = []
    for x in xs:
        c = x.shape[-3]
        if c % groups:
            raise ShapeConflict(layer, f"{c} channels not divisible into {groups} groups")
        step = c // groups
        parts.append(x[..., group_id * step:(group_id + 1) * step, :, :])
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-3)


def route_backward(
    grad: np.ndarray, channels: Sequence[int], groups: int = 1, group_id: int = 0
) -> List[np.ndarray]:
    """Split the gradient back to each source (full channel count per source)."""
    grads = []
    offset = 0
    for c in channels:
        step = c // groups
        full = np.zeros(grad.shape[:-3] + (c,) + grad.shape[-2:], dtype=grad.dtype)
        lo = group_id * step
        full[..., lo : lo + step, :, :] = grad[..., offset : offset + step, :, :]
        grads.append(full)
        offset += step
    return grads


def shortcut_add(a: np.ndarray, b: np.ndarray, layer: int = -1) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeConflict(layer, f"shortcut operands {a.shape} and {b.shape}")
    return a + b
