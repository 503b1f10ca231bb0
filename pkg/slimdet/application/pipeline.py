"""
End-to-end detection pipeline: letterbox, forward, decode, NMS, rescale.
"""
from typing import Dict, List, Tuple

import numpy as np

from ..domain.detect import decode_layer, nms
from ..domain.engine import Network, build_network, yolo_layers
from ..domain.entities import Detection, LetterboxInfo, NetworkDef, WeightStore
from ..infrastructure.augment import letterbox_image, unletterbox_detections


class Detector:
    """A loaded model plus the thresholds it detects with."""

    def __init__(
        self,
        net: NetworkDef,
        store: WeightStore,
        conf_thresh: float = 0.25,
        iou_thresh: float = 0.45,
        threads: int = 1,
        conv_method: str = "reference",
        fold_bn: bool = False,
    ) -> None:
        self.net = net
        self.conf_thresh = conf_thresh
        self.iou_thresh = iou_thresh
        self.network: Network = build_network(net, store, threads, conv_method, fold_bn)
        self.heads = yolo_layers(net)
        if not self.heads:
            raise ValueError(f"Network '{net.source_name}' has no yolo layer")

    @property
    def net_size(self) -> Tuple[int, int]:
        return self.net.input_width, self.net.input_height

    def head_features(self, image: np.ndarray) -> Tuple[Dict[int, np.ndarray], LetterboxInfo]:
        """Features feeding each yolo layer for one original-frame image."""
        canvas, info = letterbox_image(image, *self.net_size)
        return self.network.forward(canvas), info

    def detect_letterboxed(self, features: Dict[int, np.ndarray]) -> List[Detection]:
        """Decoded and suppressed detections in network-canvas coordinates."""
        raw: List[Detection] = []
        for index, layer in self.heads.items():
            raw += decode_layer(features[index], layer, self.net_size, self.conf_thresh)
        return nms(raw, self.conf_thresh, self.iou_thresh)

    def run(self, image: np.ndarray) -> Tuple[List[Detection], Dict[int, np.ndarray]]:
        """Detections in the original frame together with the raw head features."""
        features, info = self.head_features(image)
        return unletterbox_detections(self.detect_letterboxed(features), info), features

    def __call__(self, image: np.ndarray) -> List[Detection]:
        return self.run(image)[0]
