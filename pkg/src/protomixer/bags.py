"""Bag containers passed between reduction, storage and training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmbeddingBag:
    """One slide: K patch embeddings of width N plus its labels."""

    slide_id: str
    class_label: int
    domain_id: int
    features: np.ndarray

    @property
    def num_instances(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PrototypeBag:
    slide_id: str
    class_label: int
    domain_id: int
    prototypes: np.ndarray
    cluster_sizes: np.ndarray | None = None
    degenerate: bool = False

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def width(self) -> int:
        return self.prototypes.shape[1]
