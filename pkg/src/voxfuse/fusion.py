"""Per-frame fusion: assemble the predictor input, predict TSDF updates,
and integrate them into the global grids with the running weighted mean

    V <- (W * V + sum(w * v)) / (W + sum(w)),    W <- W + sum(w)

followed by the optional semantic update. A weight-threshold outlier filter
masks poorly observed voxels before meshing/evaluation.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .errors import ConfigError, PredictorFaultError
from .frames import DepthFrame, LabelFrame
from .geometry import Intrinsics, Pose
from .semantics import lift_labels, update_labels
from .volume import VoxelVolume
from .window import LocalWindow, SplatAccumulator, extract, splat

# set VOXFUSE_DEBUG=1 to re-check the grid invariants after every frame
_DEBUG_VALIDATE = bool(os.environ.get("VOXFUSE_DEBUG"))


@dataclass
class FusionConfig:
    window_size: int = 9
    truncation: float | None = None  # None: take the volume's truncation
    outlier_weight_threshold: float = 2.0
    semantics_enabled: bool = True

    def __post_init__(self):
        if self.window_size % 2 == 0 or self.window_size < 1:
            raise ConfigError(f"window_size must be odd, got {self.window_size}")
        if self.outlier_weight_threshold < 0:
            raise ConfigError("outlier_weight_threshold must be >= 0")


@dataclass
class FusionInput:
    """The assembled per-frame predictor input [depth, semantics, V*, W*]."""

    depth: np.ndarray  # (H, W) meters
    semantic: Optional[np.ndarray]  # (H, W) class ids, None when disabled
    tsdf_window: np.ndarray  # (H, W, T)
    weight_window: np.ndarray  # (H, W, T)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        h, w, _ = self.tsdf_window.shape
        if self.depth.shape != (h, w) or self.valid.shape != (h, w):
            raise ConfigError("fusion input shapes are inconsistent")
        if self.weight_window.shape != self.tsdf_window.shape:
            raise ConfigError("tsdf and weight windows must share a shape")
        if self.semantic is not None and self.semantic.shape != (h, w):
            raise ConfigError("semantic frame shape mismatch")

    @property
    def window_size(self) -> int:
        return self.tsdf_window.shape[2]


class FusionPredictor(Protocol):
    """Strategy mapping a FusionInput to per-sample TSDF updates.

    Returns (updates, update_weights), both (H, W, T); updates are clamped
    to the truncation band by the pipeline, weights must be >= 0.
    """

    def predict(self, fusion_input: FusionInput) -> tuple: ...


class ClassicPredictor:
    """Stateless truncated-signed-distance averaging baseline.

    Each sample's update is its signed distance to the observed surface
    along the ray (positive in front), clamped to the truncation band.
    Samples more than one truncation behind the surface get weight zero so
    occluded space is never carved.
    """

    def __init__(self, truncation: float, sample_spacing: float):
        if truncation <= 0 or sample_spacing <= 0:
            raise ConfigError("truncation and sample_spacing must be positive")
        self.truncation = truncation
        self.sample_spacing = sample_spacing

    def predict(self, fusion_input: FusionInput) -> tuple:
        h, w = fusion_input.depth.shape
        t = fusion_input.window_size
        half = (t - 1) // 2
        # signed distance from sample k to the surface along the ray:
        # samples in front of the surface (k < half) are positive
        sdist = (half - np.arange(t, dtype=np.float32)) * np.float32(self.sample_spacing)
        values = np.clip(sdist, -self.truncation, self.truncation)
        weights = (sdist >= -self.truncation).astype(np.float32)

        updates = np.broadcast_to(values, (h, w, t)).copy()
        update_weights = np.where(
            fusion_input.valid[:, :, None], weights[None, None, :], np.float32(0.0)
        )
        return updates, update_weights


@dataclass
class FrameReport:
    rays_valid: int
    voxels_touched: int
    elapsed: float
    stage_seconds: dict = field(default_factory=dict)


def integrate(volume: VoxelVolume, window: LocalWindow, updates: np.ndarray,
              update_weights: np.ndarray) -> SplatAccumulator:
    """Splat updates and fold them into the global grids.

    Voxels receiving zero total weight are untouched; the stored distance is
    clamped to the truncation band. Returns the splat accumulator (the
    touched voxel set).
    """
    acc = splat(volume, window, updates, update_weights)
    if acc.touched == 0:
        return acc
    cfg = volume.config
    with volume.write_lock:
        tsdf_flat = volume.tsdf.reshape(-1)
        weight_flat = volume.weight.reshape(-1)
        w_old = weight_flat[acc.indices].astype(np.float64)
        v_old = tsdf_flat[acc.indices].astype(np.float64)
        w_new = w_old + acc.sum_w
        v_new = (w_old * v_old + acc.sum_wv) / w_new
        np.clip(v_new, -cfg.truncation, cfg.truncation, out=v_new)
        if cfg.max_weight is not None:
            np.minimum(w_new, cfg.max_weight, out=w_new)
        tsdf_flat[acc.indices] = v_new.astype(cfg.float_dtype)
        weight_flat[acc.indices] = w_new.astype(cfg.float_dtype)
    return acc


def fuse_frame(volume: VoxelVolume, depth_frame: DepthFrame,
               label_frame: Optional[LabelFrame], intrinsics: Intrinsics,
               pose: Pose, predictor: FusionPredictor,
               config: FusionConfig) -> FrameReport:
    """Run one frame through extract -> predict -> integrate -> semantics.

    Deterministic given identical inputs. If the predictor emits non-finite
    values or negative weights the frame is rejected before any mutation and
    a PredictorFaultError is raised.
    """
    t0 = time.perf_counter()
    truncation = config.truncation if config.truncation is not None else volume.config.truncation

    # the predictor input needs only the tsdf/weight windows
    window = extract(volume, depth_frame, intrinsics, pose, config.window_size,
                     channels=("tsdf", "weight"))
    fusion_input = FusionInput(
        depth=depth_frame.depth,
        semantic=(label_frame.labels if (label_frame is not None and config.semantics_enabled)
                  else None),
        tsdf_window=window.tsdf,
        weight_window=window.weight,
        valid=window.valid,
    )
    t1 = time.perf_counter()

    updates, update_weights = predictor.predict(fusion_input)
    if not (np.all(np.isfinite(updates)) and np.all(np.isfinite(update_weights))):
        raise PredictorFaultError("predictor produced non-finite values; frame skipped")
    if np.any(update_weights < 0):
        raise PredictorFaultError("predictor produced negative weights; frame skipped")
    updates = np.clip(updates, -truncation, truncation)
    t2 = time.perf_counter()

    with volume.write_lock:
        acc = integrate(volume, window, updates, update_weights)
        t3 = time.perf_counter()
        if label_frame is not None and config.semantics_enabled:
            labels, scores = lift_labels(label_frame, window)
            # only voxels actually touched by the splat receive labels
            scores = np.where(update_weights > 0, scores, np.float32(0.0))
            update_labels(volume, window, labels, scores)
            volume.class_count = max(volume.class_count, label_frame.class_count)
        t4 = time.perf_counter()

    if _DEBUG_VALIDATE:
        volume.validate()

    return FrameReport(
        rays_valid=int(np.count_nonzero(window.valid)),
        voxels_touched=acc.touched,
        elapsed=t4 - t0,
        stage_seconds={
            "extract": t1 - t0,
            "predict": t2 - t1,
            "integrate": t3 - t2,
            "semantic": t4 - t3,
        },
    )


def filter_outliers(volume: VoxelVolume, threshold: float, copy: bool = True) -> VoxelVolume:
    """Mark voxels with weight below `threshold` unknown (weight zeroed).

    With copy=True (default) the original volume is untouched and a filtered
    copy is returned; copy=False filters in place.
    """
    if threshold < 0:
        raise ConfigError("outlier filter threshold must be >= 0")
    out = volume.copy() if copy else volume
    if threshold > 0:
        with out.write_lock:
            low = out.weight.astype(np.float32) < threshold
            out.weight[low] = 0
    return out
