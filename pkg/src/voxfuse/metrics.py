"""Evaluation and loss numerics.

Reconstruction quality is scored with precision/recall/F-score between
dense area-weighted surface samples of two meshes (point-to-point nearest
distances). Semantic quality is per-class IoU on ground-truth mesh vertices
against the labels carried by the predicted volume. The fusion and
segmentation training losses are provided as verified numeric utilities.

Surface sampling is derived from a counter-based hash of each triangle's
vertex coordinates, so the samples of a triangle do not depend on the rest
of the mesh: filtering a mesh to a subset of its triangles keeps the
surviving samples identical, which makes recall exactly monotone under the
outlier-filter sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptyMeshError
from .meshing import TriMesh
from .volume import VoxelVolume

DEFAULT_SAMPLE_DENSITY = 1e5  # samples per square meter (10 per cm^2)
DEFAULT_FSCORE_THRESHOLD = 0.01  # meters
DEFAULT_IOU_CUTOFF_FACTOR = 2.0  # times the voxel size


# --- deterministic counter-based uniforms -------------------------------------

def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


def _hash_uniform(key: np.ndarray, counter: int, seed: int) -> np.ndarray:
    """Uniform floats in [0, 1) derived from integer keys, reproducibly."""
    h = _splitmix64(key ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    h = _splitmix64(h ^ np.uint64(counter))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _triangle_keys(mesh: TriMesh) -> np.ndarray:
    """A content hash per triangle, stable under re-indexing."""
    with np.errstate(all="ignore"):
        coords = mesh.vertices[mesh.triangles].reshape(-1, 9)
    bits = coords.astype(np.float64).view(np.uint64)
    key = np.zeros(len(coords), dtype=np.uint64)
    for i in range(9):
        key = _splitmix64(key ^ bits[:, i])
    return key


def sample_surface(mesh: TriMesh, density: float = DEFAULT_SAMPLE_DENSITY,
                   seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples, (P, 3).

    Each triangle contributes floor(area * density) points plus one more
    with probability equal to the fractional remainder, decided by its
    content hash; positions come from the same hash stream.
    """
    if mesh.is_empty:
        return np.empty((0, 3))
    areas = mesh.triangle_areas()
    keys = _triangle_keys(mesh)
    target = areas * density
    counts = np.floor(target).astype(np.int64)
    counts += (_hash_uniform(keys, 0, seed) < (target - counts)).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.empty((0, 3))

    tri_of_sample = np.repeat(np.arange(len(counts)), counts)
    # per-sample counter within its triangle
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    counter = np.arange(total) - offsets[tri_of_sample]

    k = _splitmix64(keys[tri_of_sample] ^ counter.astype(np.uint64))
    u = _hash_uniform(k, 1, seed)
    v = _hash_uniform(k, 2, seed)

    a = mesh.vertices[mesh.triangles[tri_of_sample, 0]]
    b = mesh.vertices[mesh.triangles[tri_of_sample, 1]]
    c = mesh.vertices[mesh.triangles[tri_of_sample, 2]]
    su = np.sqrt(u)
    return (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c


@dataclass
class ReconReport:
    """Precision/recall/F-score in percent at a distance threshold."""

    precision: float
    recall: float
    f1: float
    distance_threshold: float
    n_pred_points: int
    n_gt_points: int

    def __post_init__(self):
        expected = 0.0 if self.precision + self.recall == 0 else (
            2 * self.precision * self.recall / (self.precision + self.recall))
        assert abs(self.f1 - expected) < 1e-9


def fscore(pred_mesh: TriMesh, gt_mesh: TriMesh, threshold: float = DEFAULT_FSCORE_THRESHOLD,
           samples: int | None = None, density: float = DEFAULT_SAMPLE_DENSITY,
           seed: int = 0) -> ReconReport:
    """Surface F-score between two meshes at a distance threshold.

    precision: fraction of predicted-surface samples within `threshold` of a
    ground-truth sample; recall symmetric. When `samples` is given the
    density is derived from the two meshes' total area.
    """
    if threshold <= 0:
        raise ConfigError("distance threshold must be positive")
    if pred_mesh.is_empty and gt_mesh.is_empty:
        raise EmptyMeshError("both meshes are empty")
    if samples is not None:
        area = pred_mesh.area() + gt_mesh.area()
        if area <= 0:
            raise EmptyMeshError("meshes have zero surface area")
        density = 2.0 * samples / area
    pred_pts = sample_surface(pred_mesh, density, seed)
    gt_pts = sample_surface(gt_mesh, density, seed)

    if len(pred_pts) == 0 or len(gt_pts) == 0:
        precision = recall = 0.0
    else:
        d_pred = cKDTree(gt_pts).query(pred_pts, k=1)[0]
        d_gt = cKDTree(pred_pts).query(gt_pts, k=1)[0]
        precision = 100.0 * float(np.count_nonzero(d_pred <= threshold)) / len(pred_pts)
        recall = 100.0 * float(np.count_nonzero(d_gt <= threshold)) / len(gt_pts)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ReconReport(precision, recall, f1, threshold, len(pred_pts), len(gt_pts))


# --- semantic evaluation -------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows are ground truth classes, columns predictions (0 = unlabeled)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ConfigError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise ConfigError("confusion matrix entries must be >= 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(gt_labels: np.ndarray, pred_labels: np.ndarray,
                     class_count: int) -> ConfusionMatrix:
    gt = np.asarray(gt_labels, dtype=np.int64)
    pred = np.asarray(pred_labels, dtype=np.int64)
    if gt.shape != pred.shape:
        raise ConfigError("label arrays must have equal shapes")
    idx = gt * class_count + pred
    counts = np.bincount(idx.ravel(), minlength=class_count * class_count)
    return ConfusionMatrix(counts.reshape(class_count, class_count))


def nearest_point_labels(src_points: np.ndarray, src_labels: np.ndarray,
                         query_points: np.ndarray, cutoff: float) -> np.ndarray:
    """Label each query point from its nearest labeled source point.

    Queries with no source point within `cutoff` meters stay unlabeled (0).
    """
    query_points = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(query_points), dtype=np.uint8)
    src_points = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    if len(src_points) == 0 or len(query_points) == 0:
        return out
    dist, nearest = cKDTree(src_points).query(query_points, k=1)
    within = dist <= cutoff
    out[within] = np.asarray(src_labels, dtype=np.uint8)[nearest[within]]
    return out


def labels_to_vertices(volume: VoxelVolume, vertices: np.ndarray,
                       cutoff: float | None = None) -> np.ndarray:
    """Predicted label per vertex: its nearest labeled, observed voxel.

    Voxels count as labeled when score > 0 and weight > 0 (so the outlier
    filter is honored). Vertices with no labeled voxel within `cutoff`
    meters (default 2 * voxel_size) come back unlabeled (0).
    """
    if cutoff is None:
        cutoff = DEFAULT_IOU_CUTOFF_FACTOR * volume.config.voxel_size
    labeled = (volume.score.astype(np.float32) > 0) & (volume.weight.astype(np.float32) > 0)
    idx = np.argwhere(labeled)
    if idx.size == 0:
        return np.zeros(np.asarray(vertices).reshape(-1, 3).shape[0], dtype=np.uint8)
    centers = volume.voxel_to_world(idx)
    labels = volume.label[idx[:, 0], idx[:, 1], idx[:, 2]]
    return nearest_point_labels(centers, labels, vertices, cutoff)


@dataclass
class IouReport:
    per_class: dict  # class id -> IoU over classes present in ground truth
    mean_iou: float
    confusion: ConfusionMatrix


def iou_per_class(pred_labels: np.ndarray, gt_labels: np.ndarray,
                  class_count: int | None = None) -> IouReport:
    """Per-class IoU = TP / (TP + FP + FN) on ground-truth vertices.

    Classes are those present in the ground truth (0 = unlabeled is never a
    class); unlabeled predictions count as false negatives. Mean IoU is the
    arithmetic mean over the present classes.
    """
    gt = np.asarray(gt_labels, dtype=np.int64).ravel()
    pred = np.asarray(pred_labels, dtype=np.int64).ravel()
    present = np.unique(gt[gt > 0])
    if present.size == 0:
        raise ConfigError("ground truth has no labeled vertices")
    if class_count is None:
        class_count = int(max(gt.max(), pred.max())) + 1
    cm = confusion_matrix(gt, pred, class_count)
    per_class = {}
    for c in present:
        tp = cm.counts[c, c]
        fp = cm.counts[:, c].sum() - tp
        fn = cm.counts[c, :].sum() - tp
        denom = tp + fp + fn
        per_class[int(c)] = float(tp / denom) if denom else 0.0
    mean = float(np.mean(list(per_class.values())))
    return IouReport(per_class, mean, cm)


# --- loss numerics -------------------------------------------------------------

def fusion_loss(pred_window: np.ndarray, gt_window: np.ndarray,
                lambda1: float = 1.0, lambda2: float = 10.0, lambda3: float = 0.1,
                valid_mask: np.ndarray | None = None) -> float:
    """Weighted sum over valid rays of L1 + L2 + cosine embedding terms.

    Per ray: mean absolute difference, mean squared difference, and
    1 - cos(pred, gt) between the two window vectors (0 when either vector
    has zero norm). Invalid rays are excluded entirely. The cosine term is
    scale-blind (a rescaled ray costs nothing there); the L1/L2 terms carry
    that information.
    """
    pred = np.asarray(pred_window, dtype=np.float64)
    gt = np.asarray(gt_window, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim < 1:
        raise ConfigError("windows must share a (..., T) shape")
    t = pred.shape[-1]
    pred = pred.reshape(-1, t)
    gt = gt.reshape(-1, t)
    if valid_mask is not None:
        valid = np.asarray(valid_mask, dtype=bool).reshape(-1)
        if valid.size != pred.shape[0]:
            raise ConfigError("valid mask does not match the ray count")
        pred, gt = pred[valid], gt[valid]
    if pred.shape[0] == 0:
        return 0.0

    diff = pred - gt
    l1 = np.mean(np.abs(diff), axis=1)
    l2 = np.mean(diff * diff, axis=1)
    dot_pp = np.einsum("ij,ij->i", pred, pred)
    dot_gg = np.einsum("ij,ij->i", gt, gt)
    ok = (dot_pp > 0) & (dot_gg > 0)
    cos = np.zeros(pred.shape[0])
    # sqrt of the product keeps cos(x, x) exactly 1, so equal rays cost 0
    cos[ok] = np.einsum("ij,ij->i", pred[ok], gt[ok]) / np.sqrt(dot_pp[ok] * dot_gg[ok])
    lc = np.where(ok, 1.0 - cos, 0.0)
    return float(np.sum(lambda1 * l1 + lambda2 * l2 + lambda3 * lc))


def bootstrapped_ce(pixel_losses, k: int = 4096, loss_threshold: float = 0.5) -> float:
    """Hard-pixel bootstrapped sum of per-pixel cross-entropy losses.

    If the k-th largest loss reaches `loss_threshold`, all losses at or
    above the threshold are summed; otherwise the top k are. Fewer than k
    pixels: everything is summed.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    losses = np.asarray(pixel_losses, dtype=np.float64).ravel()
    if not np.all(np.isfinite(losses)):
        raise ConfigError("losses must be finite")
    if losses.size == 0:
        return 0.0
    if losses.size <= k:
        return float(losses.sum())
    top = np.sort(losses)[::-1]
    kth = top[k - 1]
    if kth >= loss_threshold:
        return float(top[top >= loss_threshold].sum())
    return float(top[:k].sum())


def multiscale_seg_loss(main: float, aux1: float, aux2: float,
                        lambda1: float = 0.6, lambda2: float = 0.5) -> float:
    """Combine the full-scale loss with two auxiliary-scale losses."""
    for v in (main, aux1, aux2):
        if not np.isfinite(v):
            raise ConfigError("loss terms must be finite")
    return float(main + lambda1 * aux1 + lambda2 * aux2)
