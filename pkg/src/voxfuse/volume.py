"""The global voxel grids: signed distance, fusion weight, label, and score.

Grids are dense, C-contiguous with z the fastest axis, one buffer per
channel. Distance, weight and score are stored at the configured precision
(half by default) and computed upon at single precision or better; labels
are 8-bit class ids with 0 meaning "unlabeled".
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import AllocationError, ConfigError

DEFAULT_MEMORY_BUDGET = 8 << 30  # bytes

_PRECISIONS = {"half": np.float16, "single": np.float32}
# tsdf + weight + score at storage precision, label always 1 byte
_BYTES_PER_VOXEL = {"half": 2 + 2 + 1 + 2, "single": 4 + 4 + 1 + 4}


@dataclass(frozen=True)
class VolumeConfig:
    dims: tuple
    voxel_size: float
    origin: tuple = (0.0, 0.0, 0.0)
    truncation: float = 0.05
    storage_precision: str = "half"
    max_weight: float | None = None
    memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ConfigError(f"dims must be three counts >= 1, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        if self.voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.truncation < self.voxel_size:
            raise ConfigError(
                f"truncation {self.truncation} must be >= voxel_size {self.voxel_size}"
            )
        if self.storage_precision not in _PRECISIONS:
            raise ConfigError(
                f"storage_precision must be one of {sorted(_PRECISIONS)}, got {self.storage_precision!r}"
            )
        if self.max_weight is not None and self.max_weight <= 0:
            raise ConfigError("max_weight must be positive when set")

    @property
    def float_dtype(self):
        return _PRECISIONS[self.storage_precision]

    @property
    def voxel_count(self) -> int:
        x, y, z = self.dims
        return x * y * z

    @property
    def required_bytes(self) -> int:
        return self.voxel_count * _BYTES_PER_VOXEL[self.storage_precision]


class VoxelVolume:
    """Dense TSDF + weight + label + score grids with world anchoring.

    Mutated only by the integration operations (single writer at a time,
    guarded by ``write_lock``); reads may run concurrently in between.
    """

    def __init__(self, config: VolumeConfig):
        if config.required_bytes > config.memory_budget_bytes:
            raise AllocationError(
                f"volume of dims {config.dims} at {config.storage_precision} precision "
                f"requires {config.required_bytes} bytes, exceeding the "
                f"{config.memory_budget_bytes}-byte budget",
                required_bytes=config.required_bytes,
            )
        self.config = config
        dt = config.float_dtype
        self.tsdf = np.zeros(config.dims, dtype=dt)
        self.weight = np.zeros(config.dims, dtype=dt)
        self.label = np.zeros(config.dims, dtype=np.uint8)
        self.score = np.zeros(config.dims, dtype=dt)
        self.class_count = 0
        self.write_lock = threading.RLock()

    def world_to_voxel(self, points) -> np.ndarray:
        """Continuous voxel coordinates of world point(s); may be out of bounds."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.array(self.config.origin)) / self.config.voxel_size

    def voxel_to_world(self, coords) -> np.ndarray:
        """World position of continuous voxel coordinate(s)."""
        c = np.asarray(coords, dtype=np.float64)
        return c * self.config.voxel_size + np.array(self.config.origin)

    def copy(self) -> "VoxelVolume":
        out = VoxelVolume(self.config)
        out.tsdf[...] = self.tsdf
        out.weight[...] = self.weight
        out.label[...] = self.label
        out.score[...] = self.score
        out.class_count = self.class_count
        return out

    def validate(self) -> None:
        """Assert the grid invariants; raises AssertionError on violation."""
        tau = self.config.truncation + 1e-6
        assert np.all(np.abs(self.tsdf.astype(np.float32)) <= tau), "tsdf outside clamp band"
        assert np.all(self.weight.astype(np.float32) >= 0), "negative weight"
        score = self.score.astype(np.float32)
        assert np.all((score >= 0) & (score <= 1)), "score outside [0, 1]"
        assert np.all(self.label[score == 0] == 0), "labeled voxel with zero score"
        assert self.tsdf.shape == self.weight.shape == self.label.shape == self.score.shape


@dataclass
class VolumeStats:
    occupied_voxels: int
    labeled_voxels: int
    weight_histogram: tuple  # (bin_edges, counts)


DEFAULT_WEIGHT_BINS = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, float("inf"))


def new_volume(config: VolumeConfig) -> VoxelVolume:
    """Allocate a zero-initialized volume (unknown everywhere)."""
    return VoxelVolume(config)


def snapshot_stats(volume: VoxelVolume, weight_bins=DEFAULT_WEIGHT_BINS) -> VolumeStats:
    """Occupancy counters and a weight histogram over occupied voxels."""
    w = volume.weight.astype(np.float32).ravel()
    occupied = w > 0
    counts, edges = np.histogram(w[occupied], bins=np.asarray(weight_bins))
    labeled = int(np.count_nonzero(volume.score.astype(np.float32) > 0))
    return VolumeStats(
        occupied_voxels=int(np.count_nonzero(occupied)),
        labeled_voxels=labeled,
        weight_histogram=(edges, counts),
    )
