"""
Network executor: runs a NetworkDef with its WeightStore forward, and
backward for training.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from .entities import (
    ConvBlock,
    ConvLayer,
    MaxPoolLayer,
    NetworkDef,
    RouteLayer,
    ShortcutLayer,
    UpsampleLayer,
    WeightStore,
    YoloLayer,
)
from .errors import ChannelMismatch, MisalignedStore, MissingCache, ShapeConflict
from .graph import infer_shapes
from .nnops import (
    DEFAULT_EPS,
    BnParams,
    activation,
    activation_backward,
    add_bias,
    batchnorm_backward,
    batchnorm_forward,
    bias_backward,
    conv2d_backward,
    conv2d_forward,
    fold_batchnorm,
    maxpool_backward,
    maxpool_forward,
    route_backward,
    route_concat,
    upsample_backward,
    upsample_forward,
)


@dataclass
class LayerCache:
    """Activations one layer needs for its backward pass."""

    inputs: Optional[np.ndarray] = None
    conv_out: Optional[np.ndarray] = None
    pre_activation: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None


@dataclass
class ParamGrads:
    """Per-conv-layer gradients keyed by parameter name (kernel, bias, bn_gamma, bn_beta)."""

    layers: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)

    def get(self, layer: int, name: str) -> Optional[np.ndarray]:
        return self.layers.get(layer, {}).get(name)


def bn_params(block: ConvBlock, eps: float = DEFAULT_EPS) -> BnParams:
    return BnParams(
        gamma=block.bn_gamma, beta=block.bn_beta, mean=block.bn_mean, var=block.bn_var, eps=eps
    )


class Network:
    """A NetworkDef bound to its weights.

    `forward` returns the feature map feeding every yolo layer (or the last
    layer's output when the net has no yolo layer), keyed by layer index.
    """

    def __init__(
        self,
        net: NetworkDef,
        store: WeightStore,
        threads: int = 1,
        conv_method: str = "reference",
        fold_bn: bool = False,
        eps: float = DEFAULT_EPS,
    ) -> None:
        self.net = net
        self.store = store
        self.threads = threads
        self.conv_method = conv_method
        self.fold_bn = fold_bn
        self.eps = eps
        self.shapes = infer_shapes(net)
        self._caches: Optional[List[LayerCache]] = None
        self._cached_outputs: Optional[Dict[int, np.ndarray]] = None
        self._last_use = self._compute_last_use()
        self._folded: Dict[int, tuple] = {}
        for i in net.conv_indices():
            block = store.blocks.get(i)
            if block is None:
                raise MisalignedStore(i, "no parameter block")
            if fold_bn and block.batch_normalize:
                self._folded[i] = fold_batchnorm(block.kernel, None, bn_params(block, eps))

    @property
    def output_layers(self) -> List[int]:
        return list(self.shapes.outputs)

    def _compute_last_use(self) -> List[int]:
        last = list(range(len(self.net.layers)))
        for i, layer in enumerate(self.net.layers):
            if i > 0:
                last[i - 1] = max(last[i - 1], i)
            if isinstance(layer, RouteLayer):
                for s in layer.sources:
                    last[s] = max(last[s], i)
            elif isinstance(layer, ShortcutLayer):
                last[layer.source] = max(last[layer.source], i)
        for o in self.shapes.outputs:
            last[o] = len(self.net.layers)
        return last

    def _conv(
        self, i: int, layer: ConvLayer, x: np.ndarray, cache: Optional[LayerCache]
    ) -> np.ndarray:
        block = self.store.blocks[i]
        if i in self._folded:
            kernel, bias = self._folded[i]
            z = conv2d_forward(
                x, kernel, layer.stride, layer.padding, self.threads, self.conv_method
            )
            return activation(add_bias(z, bias), layer.activation)

        z = conv2d_forward(
            x, block.kernel, layer.stride, layer.padding, self.threads, self.conv_method
        )
        if block.batch_normalize:
            pre = batchnorm_forward(z, bn_params(block, self.eps))
        else:
            pre = add_bias(z, block.bias)
        if cache is not None:
            cache.inputs = x
            cache.conv_out = z
            cache.pre_activation = pre
        return activation(pre, layer.activation)

    def forward(self, x: np.ndarray, keep_cache: bool = False) -> Dict[int, np.ndarray]:
        """Run the network on a (n, c, h, w) or (c, h, w) batch."""
        squeezed = x.ndim == 3
        if squeezed:
            x = x[None]
        expected = (self.net.input_channels, self.net.input_height, self.net.input_width)
        if x.shape[1] != expected[0]:
            raise ChannelMismatch(expected[0], x.shape[1])
        if x.shape[2:] != expected[1:]:
            raise ShapeConflict(0, f"input {x.shape[2:]} does not match network {expected[1:]}")

        caches = [LayerCache() for _ in self.net.layers] if keep_cache else None
        outputs: Dict[int, np.ndarray] = {}
        current = x
        for i, layer in enumerate(self.net.layers):
            cache = caches[i] if caches is not None else None
            if isinstance(layer, ConvLayer):
                out = self._conv(i, layer, current, cache)
            elif isinstance(layer, MaxPoolLayer):
                if cache is not None:
                    out, cache.indices = maxpool_forward(
                        current, layer.size, layer.stride, return_indices=True
                    )
                    cache.inputs = current
                else:
                    out = maxpool_forward(current, layer.size, layer.stride)
            elif isinstance(layer, UpsampleLayer):
                out = upsample_forward(current, layer.factor)
            elif isinstance(layer, RouteLayer):
                out = route_concat(
                    [outputs[s] for s in layer.sources], layer.groups, layer.group_id, layer=i
                )
            elif isinstance(layer, ShortcutLayer):
                if outputs[layer.source].shape != current.shape:
                    raise ShapeConflict(i, "shortcut operands differ")
                pre = current + outputs[layer.source]
                if cache is not None:
                    cache.pre_activation = pre
                out = activation(pre, layer.activation)
            else:
                out = current
            outputs[i] = out
            current = out
            if not keep_cache:
                for j in [j for j in outputs if self._last_use[j] <= i]:
                    del outputs[j]

        self._caches = caches
        self._cached_outputs = outputs if keep_cache else None
        heads = {o: outputs[o] for o in self.shapes.outputs}
        if squeezed:
            heads = {o: v[0] for o, v in heads.items()}
        return heads

    def backward(self, head_grads: Dict[int, np.ndarray]) -> ParamGrads:
        """Backpropagate gradients of the forward outputs into parameter gradients.

        Requires a preceding `forward(..., keep_cache=True)`.
        """
        if self._caches is None or self._cached_outputs is None:
            raise MissingCache("network forward with keep_cache=True")
        caches, outputs = self._caches, self._cached_outputs
        grads: Dict[int, np.ndarray] = {}

        def accumulate(index: int, g: np.ndarray) -> None:
            if index < 0:
                return
            grads[index] = g if index not in grads else grads[index] + g

        for o, g in head_grads.items():
            accumulate(o, g if g.ndim == 4 else g[None])

        result = ParamGrads()
        for i in range(len(self.net.layers) - 1, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            layer = self.net.layers[i]
            cache = caches[i]
            if isinstance(layer, ConvLayer):
                if i in self._folded:
                    raise MissingCache(f"unfolded batch-norm parameters for layer {i}")
                block = self.store.blocks[i]
                g_pre = activation_backward(g, cache.pre_activation, layer.activation)
                entry: Dict[str, np.ndarray] = {}
                if block.batch_normalize:
                    dz, entry["bn_gamma"], entry["bn_beta"] = batchnorm_backward(
                        g_pre, cache.conv_out, bn_params(block, self.eps)
                    )
                else:
                    dz = g_pre
                    entry["bias"] = bias_backward(g_pre)
                dx, entry["kernel"] = conv2d_backward(
                    dz, cache.inputs, block.kernel, layer.stride, layer.padding
                )
                result.layers[i] = entry
                accumulate(i - 1, dx)
            elif isinstance(layer, MaxPoolLayer):
                if cache.inputs is None:
                    raise MissingCache(f"maxpool input at layer {i}")
                accumulate(
                    i - 1,
                    maxpool_backward(
                        g, cache.indices, cache.inputs.shape, layer.size, layer.stride
                    ),
                )
            elif isinstance(layer, UpsampleLayer):
                accumulate(i - 1, upsample_backward(g, layer.factor))
            elif isinstance(layer, RouteLayer):
                channels = [outputs[s].shape[1] for s in layer.sources]
                for s, gs in zip(
                    layer.sources, route_backward(g, channels, layer.groups, layer.group_id)
                ):
                    accumulate(s, gs)
            elif isinstance(layer, ShortcutLayer):
                g_pre = activation_backward(g, cache.pre_activation, layer.activation)
                accumulate(i - 1, g_pre)
                accumulate(layer.source, g_pre)
            else:
                accumulate(i - 1, g)
        return result

    def release(self) -> None:
        self._caches = None
        self._cached_outputs = None


def build_network(
    net: NetworkDef,
    store: WeightStore,
    threads: int = 1,
    conv_method: str = "reference",
    fold_bn: bool = False,
    eps: float = DEFAULT_EPS,
) -> Network:
    logger.debug(
        f"Building executor for '{net.source_name}' (threads={threads}, "
        f"conv={conv_method}, fold_bn={fold_bn})"
    )
    return Network(net, store, threads, conv_method, fold_bn, eps)


def yolo_layers(net: NetworkDef) -> Dict[int, YoloLayer]:
    return {i: net.layers[i] for i in net.yolo_indices()}

