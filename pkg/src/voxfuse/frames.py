"""Per-frame sensor inputs: metric depth and per-pixel semantic labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class DepthFrame:
    """Metric depth map; zero marks an invalid pixel."""

    depth: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.depth.ndim != 2:
            raise ConfigError(f"depth must be 2-D, got shape {self.depth.shape}")

    @property
    def shape(self):
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class LabelFrame:
    """Per-pixel class ids with confidence scores in [0, 1].

    Class id 0 is reserved for "unlabeled" and always carries score 0.
    """

    labels: np.ndarray
    scores: np.ndarray
    class_count: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.labels.shape != self.scores.shape or self.labels.ndim != 2:
            raise ConfigError(
                f"labels {self.labels.shape} and scores {self.scores.shape} must be equal 2-D shapes"
            )
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ConfigError("scores must lie in [0, 1]")
        if self.class_count == 0:
            self.class_count = int(self.labels.max()) + 1
        elif int(self.labels.max()) >= self.class_count:
            raise ConfigError(
                f"label {int(self.labels.max())} exceeds class_count {self.class_count}"
            )
        # unlabeled pixels carry no confidence; keep the pairing consistent
        self.scores = np.where(self.labels == 0, np.float32(0.0), self.scores)

    @property
    def shape(self):
        return self.labels.shape
