"""
Repository interfaces for the domain layer.
"""
from abc import ABC, abstractmethod
from typing import List, Tuple

from .entities import NetworkDef, Sample, WeightStore


class ModelRepository(ABC):
    """Abstract repository for network definitions and their weights."""

    @abstractmethod
    def load_network(self, cfg_path: str) -> NetworkDef:
        """Load a network definition."""
        pass

    @abstractmethod
    def load_model(self, cfg_path: str, weights_path: str) -> Tuple[NetworkDef, WeightStore]:
        """Load a network definition together with its weights."""
        pass

    @abstractmethod
    def save_model(
        self, net: NetworkDef, store: WeightStore, cfg_path: str, weights_path: str
    ) -> None:
        """Persist a network definition and its weights."""
        pass


class DatasetRepository(ABC):
    """Abstract repository for annotated image samples."""

    @abstractmethod
    def load_samples(self) -> List[Sample]:
        """Return every sample of the dataset in a stable order."""
        pass

    @abstractmethod
    def describe(self) -> str:
        """Short human-readable description used in logs."""
        pass
