"""
File-backed model repository: cfg text plus darknet-layout weights.
"""
from pathlib import Path
from typing import Tuple

from loguru import logger

from ..domain.entities import NetworkDef, WeightStore
from ..domain.graph import count_parameters
from ..domain.repositories import ModelRepository
from .netcfg import resolve_cfg, serialize_cfg
from .weights import read_weights_file, write_weights_file


class FileModelRepository(ModelRepository):
    """Reads descriptions from disk or the bundled set, weights from disk."""

    def load_network(self, cfg_path: str) -> NetworkDef:
        """
        Load a network description by path or bundled name.

        Args:
            cfg_path: File path, or one of `yolov4`, `yolov4-tiny`, `toy`

        Returns:
            Parsed network definition
        """
        net = resolve_cfg(cfg_path)
        logger.info(
            f"Loaded network '{net.source_name}': {len(net.layers)} layers, "
            f"input {net.input_width}x{net.input_height}x{net.input_channels}"
        )
        return net

    def load_model(self, cfg_path: str, weights_path: str) -> Tuple[NetworkDef, WeightStore]:
        """
        Load a description and the weights aligned to it.

        Raises:
            SizeMismatch: If the weights file holds a different float count
            BadHeader: If the weights header is truncated or invalid
        """
        net = self.load_network(cfg_path)
        store = read_weights_file(weights_path, net)
        logger.info(
            f"Loaded {store.total_floats():,} weights from {weights_path} "
            f"({count_parameters(net).total:,} parameters)"
        )
        return net, store

    def save_model(
        self, net: NetworkDef, store: WeightStore, cfg_path: str, weights_path: str
    ) -> None:
        for path in (cfg_path, weights_path):
            Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg_path).write_text(serialize_cfg(net), encoding="utf-8")
        written = write_weights_file(weights_path, store, net)
        logger.info(f"Saved model to {cfg_path} and {weights_path} ({written:,} bytes)")
