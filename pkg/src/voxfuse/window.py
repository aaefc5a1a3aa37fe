"""Camera-aligned local windows: trilinear extraction and splat-back.

For every valid depth pixel, `window_size` points are sampled along the
viewing ray (one voxel apart, centered on the observed surface). Extraction
reads the global grids at those points by trilinear interpolation; splatting
distributes per-sample updates back to the same 8 corner voxels with the
same trilinear weights.

Corner weights are computed in float64 so that the weights of one sample sum
to 1 within 1e-9; grid values are interpolated in float32. The inner loops
live in voxfuse._kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError
from .frames import DepthFrame
from .geometry import Intrinsics, Pose, pixel_direction_grid
from .volume import VoxelVolume

ALL_CHANNELS = ("tsdf", "weight", "label", "score")

# largest accumulator box (in voxels) handled densely; beyond this the splat
# falls back to index compaction to bound memory
_DENSE_SPLAT_CAP = 1 << 24


@dataclass
class LocalWindow:
    """Extracted values/weights/labels/scores of shape (H, W, T)."""

    tsdf: np.ndarray
    weight: np.ndarray
    label: np.ndarray
    score: np.ndarray
    sample_coords: np.ndarray  # (H, W, T, 3) continuous voxel coordinates
    valid: np.ndarray  # (H, W) bool
    _corners: dict | None = field(default=None, repr=False, compare=False)

    @property
    def shape(self):
        return self.tsdf.shape


def _sample_basis(coords: np.ndarray, dims) -> tuple:
    """Base voxel, fractional offset, and flat base index per sample (N, 3).

    Samples exactly on the upper grid boundary fold onto the last interior
    cell (fraction 1), so every corner index stays in bounds.
    """
    hi = np.array([dims[0] - 2, dims[1] - 2, dims[2] - 2], dtype=np.int64)
    base = np.floor(coords).astype(np.int64)
    np.minimum(base, hi, out=base)
    np.maximum(base, 0, out=base)
    frac = coords - base
    base_flat = (base[:, 0] * dims[1] + base[:, 1]) * dims[2] + base[:, 2]
    return base, frac, base_flat


def sample_grid(volume: VoxelVolume, coords: np.ndarray,
                channels=ALL_CHANNELS) -> dict:
    """Trilinear read of scalar grids plus nearest-corner labels.

    `coords` is (N, 3) continuous voxel coordinates, all inside
    [0, dims - 1]. Returns a dict with one (N,) array per requested channel.
    """
    dims = volume.config.dims
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    base, frac, base_flat = _sample_basis(coords, dims)

    scalar = [c for c in channels if c != "label"]
    outs = _kernels.gather_channels([getattr(volume, c) for c in scalar],
                                    base_flat, frac, dims)
    result = dict(zip(scalar, outs))

    if "label" in channels:
        # labels are categorical: take the corner with the largest trilinear
        # weight, i.e. the nearest lattice point
        nearest = np.rint(coords).astype(np.int64)
        np.clip(nearest, 0, np.array(dims) - 1, out=nearest)
        flat = (nearest[:, 0] * dims[1] + nearest[:, 1]) * dims[2] + nearest[:, 2]
        result["label"] = volume.label.reshape(-1)[flat]
    return result


def sample_coordinates(depth_frame: DepthFrame, intrinsics: Intrinsics, pose: Pose,
                       window_size: int, volume: VoxelVolume):
    """Window sample positions in voxel coordinates plus the validity mask.

    Matches geometry.ray_samples: samples are spaced one voxel edge apart
    along the unit ray direction, the center sample at the observed surface.
    Rays with non-positive depth or any out-of-bounds sample are invalid and
    their coordinates are zeroed. Returns (coords (H, W, T, 3), valid (H, W),
    ray_idx of the valid rays).
    """
    h, w = depth_frame.shape
    if (intrinsics.height, intrinsics.width) != (h, w):
        raise ConfigError(
            f"depth frame {h}x{w} does not match intrinsics "
            f"{intrinsics.height}x{intrinsics.width}"
        )
    if window_size % 2 == 0 or window_size < 1:
        raise ConfigError(f"window size must be odd and >= 1, got {window_size}")

    voxel = volume.config.voxel_size
    origin = np.array(volume.config.origin)
    dirs_cam = pixel_direction_grid(intrinsics).reshape(-1, 3)
    depth = depth_frame.depth.reshape(-1).astype(np.float64)

    cand = np.flatnonzero(depth > 0)
    coords = np.zeros((h * w, window_size, 3))
    valid = np.zeros(h * w, dtype=bool)
    if cand.size:
        d = depth[cand, None]
        dirs = dirs_cam[cand]
        # voxel-unit positions: surface point plus integer steps along the ray
        surf = ((dirs * d) @ pose.rotation.T + (pose.translation - origin)) / voxel
        unit = (dirs / np.linalg.norm(dirs, axis=1, keepdims=True)) @ pose.rotation.T
        half = (window_size - 1) // 2
        steps = np.arange(window_size, dtype=np.float64) - half
        c = surf[:, None, :] + unit[:, None, :] * steps[None, :, None]
        limit = np.array(volume.config.dims, dtype=np.float64) - 1.0
        ok = np.all((c >= 0.0) & (c <= limit), axis=(1, 2))
        keep = cand[ok]
        coords[keep] = c[ok]
        valid[keep] = True
    return coords.reshape(h, w, window_size, 3), valid.reshape(h, w), np.flatnonzero(valid)


def extract(volume: VoxelVolume, depth_frame: DepthFrame, intrinsics: Intrinsics,
            pose: Pose, window_size: int, channels=ALL_CHANNELS) -> LocalWindow:
    """Read the local camera-aligned window from the global grids.

    Invalid rays come back zeroed. `channels` limits which grids are
    interpolated (the others stay zero); the fusion pipeline only needs
    tsdf and weight.
    """
    coords, valid, ray_idx = sample_coordinates(depth_frame, intrinsics, pose,
                                                window_size, volume)
    h, w = depth_frame.shape
    t = window_size
    out = {c: np.zeros((h, w, t), np.uint8 if c == "label" else np.float32)
           for c in ALL_CHANNELS}

    cache = None
    if ray_idx.size:
        flat_coords = coords.reshape(-1, t, 3)[ray_idx].reshape(-1, 3)
        base, frac, base_flat = _sample_basis(flat_coords, volume.config.dims)
        cache = {"ray_idx": ray_idx, "base": base, "frac": frac,
                 "base_flat": base_flat}
        scalar = [c for c in channels if c != "label"]
        values = _kernels.gather_channels([getattr(volume, c) for c in scalar],
                                          base_flat, frac, volume.config.dims)
        for name, vals in zip(scalar, values):
            out[name].reshape(-1, t)[ray_idx] = vals.reshape(ray_idx.size, t)
        if "label" in channels:
            dims = volume.config.dims
            nearest = np.rint(flat_coords).astype(np.int64)
            np.clip(nearest, 0, np.array(dims) - 1, out=nearest)
            flat = (nearest[:, 0] * dims[1] + nearest[:, 1]) * dims[2] + nearest[:, 2]
            out["label"].reshape(-1, t)[ray_idx] = \
                volume.label.reshape(-1)[flat].reshape(ray_idx.size, t)

    return LocalWindow(tsdf=out["tsdf"], weight=out["weight"], label=out["label"],
                       score=out["score"], sample_coords=coords, valid=valid,
                       _corners=cache)


@dataclass
class SplatAccumulator:
    """Per-voxel sums over all contributions splatted in one frame.

    Indices are flat voxel indices in deterministic (first-touch) order.
    """

    indices: np.ndarray
    sum_wv: np.ndarray
    sum_w: np.ndarray

    @property
    def touched(self) -> int:
        return int(self.indices.size)


def window_basis(window: LocalWindow, dims) -> tuple:
    """(ray_idx, base, frac, base_flat) for the valid samples of a window."""
    if window._corners is not None:
        c = window._corners
        return c["ray_idx"], c["base"], c["frac"], c["base_flat"]
    t = window.shape[2]
    ray_idx = np.flatnonzero(window.valid.reshape(-1))
    if ray_idx.size == 0:
        empty = np.empty((0, 3))
        return ray_idx, empty.astype(np.int64), empty, np.empty(0, np.int64)
    coords = window.sample_coords.reshape(-1, t, 3)[ray_idx].reshape(-1, 3)
    base, frac, base_flat = _sample_basis(coords, dims)
    window._corners = {"ray_idx": ray_idx, "base": base, "frac": frac,
                       "base_flat": base_flat}
    return ray_idx, base, frac, base_flat


def window_corners(window: LocalWindow, dims) -> tuple:
    """Explicit (8, N) corner indices and weights for the valid samples."""
    ray_idx, base, frac, base_flat = window_basis(window, dims)
    flat = _kernels._corner_flat(base_flat, dims[1] * dims[2], dims[2])
    weights = _kernels._corner_weights(frac)
    return ray_idx, flat, weights, base


def splat(volume: VoxelVolume, window: LocalWindow, updates: np.ndarray,
          update_weights: np.ndarray) -> SplatAccumulator:
    """Distribute per-sample updates to their 8 corner voxels.

    Every sample hands its update_weight to the corners split by trilinear
    weight (conserving the total) and update * weight into sum_wv. Only
    valid rays contribute; zero-weight samples touch nothing.
    """
    if updates.shape != window.shape or update_weights.shape != window.shape:
        raise ConfigError(
            f"updates {updates.shape} / weights {update_weights.shape} "
            f"must match window {window.shape}"
        )
    dims = volume.config.dims
    t = window.shape[2]
    ray_idx, base, frac, base_flat = window_basis(window, dims)
    empty = SplatAccumulator(np.empty(0, np.int64), np.empty(0), np.empty(0))
    if ray_idx.size == 0:
        return empty

    upd = updates.reshape(-1, t)[ray_idx].reshape(-1).astype(np.float64)
    uw = update_weights.reshape(-1, t)[ray_idx].reshape(-1).astype(np.float64)
    if not np.any(uw > 0):
        return empty

    lo = base.min(axis=0)
    hi = base.max(axis=0) + 1  # corners reach base + 1
    box = hi - lo + 1
    box_n = int(box[0]) * int(box[1]) * int(box[2])

    if box_n <= _DENSE_SPLAT_CAP:
        box_yz = int(box[1]) * int(box[2])
        box_z = int(box[2])
        base_local = ((base[:, 0] - lo[0]) * box[1] + (base[:, 1] - lo[1])) * box[2] \
            + (base[:, 2] - lo[2])
        acc_w, acc_wv, touched = _kernels.scatter_accumulate(
            base_local, frac, uw, upd, box_yz, box_z, box_n)
        tz = touched % box[2]
        ty = (touched // box[2]) % box[1]
        tx = touched // box_yz
        indices = ((tx + lo[0]) * dims[1] + (ty + lo[1])) * dims[2] + (tz + lo[2])
        return SplatAccumulator(indices, acc_wv[touched], acc_w[touched])

    # huge frame footprint: compact the indices instead of going dense
    flat = _kernels._corner_flat(base_flat, dims[1] * dims[2], dims[2]).reshape(-1)
    w = _kernels._corner_weights(frac)
    contrib_w = (w * uw[None, :]).reshape(-1)
    contrib_wv = (w * (uw * upd)[None, :]).reshape(-1)
    uniq, inv = np.unique(flat, return_inverse=True)
    sum_w = np.bincount(inv, weights=contrib_w, minlength=uniq.size)
    sum_wv = np.bincount(inv, weights=contrib_wv, minlength=uniq.size)
    keep = sum_w > 0
    return SplatAccumulator(uniq[keep], sum_wv[keep], sum_w[keep])
