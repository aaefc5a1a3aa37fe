"""Semantic label fusion: per-ray label lifting and max-confidence updates.

Every valid ray stamps its pixel label and confidence onto all of its window
samples; the global label/score grids then take the incoming label wherever
its confidence meets or exceeds the stored score, and the stored score keeps
the running maximum:

    S <- max(s, S)
    L <- l   if s >= S_prev, else unchanged

When several same-frame samples land in one voxel, the contribution with
the highest score wins; ties go to the lowest ray index, so the result does
not depend on ray processing order.

Known limitation: scores only grow, so long sequences of confident but
inconsistent predictions plateau the score grid at high values and freeze
the labels; there is no decay mechanism.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import ConfigError
from .frames import LabelFrame
from .volume import VoxelVolume
from .window import LocalWindow, window_basis


def lift_labels(label_frame: LabelFrame, window: LocalWindow) -> tuple:
    """Broadcast per-pixel labels/scores along each valid ray of the window.

    Returns (labels, scores) of shape (H, W, T); invalid rays carry
    label 0 and score 0.
    """
    h, w, t = window.shape
    if label_frame.shape != (h, w):
        raise ConfigError(
            f"label frame {label_frame.shape} does not match window {(h, w)}"
        )
    valid = window.valid
    labels = np.where(valid, label_frame.labels, 0).astype(np.uint8)
    scores = np.where(valid, label_frame.scores, np.float32(0.0))
    return (
        np.repeat(labels[:, :, None], t, axis=2),
        np.repeat(scores[:, :, None], t, axis=2),
    )


def update_labels(volume: VoxelVolume, window: LocalWindow,
                  labels: np.ndarray, scores: np.ndarray) -> int:
    """Fold lifted labels into the global label/score grids.

    Zero-score contributions are dropped (they carry no information and
    keeping them would let labels appear without confidence). Returns the
    number of voxels whose stored label or score changed.
    """
    if labels.shape != window.shape or scores.shape != window.shape:
        raise ConfigError(
            f"labels {labels.shape} / scores {scores.shape} must match window {window.shape}"
        )
    dims = volume.config.dims
    t = window.shape[2]
    ray_idx, base, frac, base_flat = window_basis(window, dims)
    if ray_idx.size == 0:
        return 0

    lab = labels.reshape(-1, t)[ray_idx].reshape(-1)
    sco = scores.reshape(-1, t)[ray_idx].reshape(-1).astype(np.float32)
    if not np.any(sco > 0):
        return 0
    # the ray id of each sample, for the deterministic tie-break
    rays = np.repeat(ray_idx, t)

    lo = base.min(axis=0)
    box = base.max(axis=0) + 2 - lo  # corners reach base + 1
    box_yz = int(box[1]) * int(box[2])
    box_z = int(box[2])
    base_local = ((base[:, 0] - lo[0]) * box[1] + (base[:, 1] - lo[1])) * box[2] \
        + (base[:, 2] - lo[2])
    local, l_w, s_w = _kernels.label_winners(
        base_local, frac, sco, lab, rays, box_yz, box_z,
        int(box[0]) * box_yz)
    if local.size == 0:
        return 0
    tz = local % box[2]
    ty = (local // box[2]) % box[1]
    tx = local // box_yz
    vox_w = ((tx + lo[0]) * dims[1] + (ty + lo[1])) * dims[2] + (tz + lo[2])

    with volume.write_lock:
        label_flat = volume.label.reshape(-1)
        score_flat = volume.score.reshape(-1)
        s_prev = score_flat[vox_w].astype(np.float32)
        replace = s_w >= s_prev
        changed = int(np.count_nonzero(
            (replace & (label_flat[vox_w] != l_w)) | (s_w > s_prev)
        ))
        label_flat[vox_w[replace]] = l_w[replace]
        score_flat[vox_w] = np.maximum(s_prev, s_w).astype(volume.config.float_dtype)
    return changed
