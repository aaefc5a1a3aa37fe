"""Marching cubes over the TSDF zero crossing with label/confidence transfer.

Cells participate only when all 8 corner voxels are known (weight > 0) and
pass the outlier filter (weight >= threshold); cells mixing known and
unknown corners are skipped entirely so unobserved space never produces
surface. Vertices are shared through a global lattice-edge index, which
makes fully observed closed surfaces watertight, and cells are emitted in
z-fastest scan order so the output is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import EDGE_TABLE, TRI_COUNT, TRI_TABLE
from .errors import ConfigError
from .volume import VoxelVolume

# cell edge -> (axis, base-corner offset) in the corner numbering of _mc_tables
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)
_EDGE_BASE = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
     [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
     [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.int64)

_CORNER_OFFSETS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64)


@dataclass
class TriMesh:
    """Triangle mesh with one label and confidence per vertex."""

    vertices: np.ndarray  # (N, 3) float64 world coordinates
    triangles: np.ndarray  # (M, 3) int64 vertex indices
    vertex_labels: np.ndarray  # (N,) uint8
    vertex_scores: np.ndarray  # (N,) float32

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.vertex_labels is None:
            self.vertex_labels = np.zeros(n, dtype=np.uint8)
        if self.vertex_scores is None:
            self.vertex_scores = np.zeros(n, dtype=np.float32)
        self.vertex_labels = np.asarray(self.vertex_labels, dtype=np.uint8).reshape(-1)
        self.vertex_scores = np.asarray(self.vertex_scores, dtype=np.float32).reshape(-1)
        if len(self.vertex_labels) != n or len(self.vertex_scores) != n:
            raise ConfigError("per-vertex attributes must match the vertex count")
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= n:
                raise ConfigError("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ConfigError("degenerate triangle (repeated vertex index)")
        if n and not np.all(np.isfinite(self.vertices)):
            raise ConfigError("non-finite vertex coordinates")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.empty((0, 3)), np.empty((0, 3), np.int64),
                   np.empty(0, np.uint8), np.empty(0, np.float32))

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum()) if len(self.triangles) else 0.0


def _edge_vertex_data(volume: VoxelVolume, edge_ids: np.ndarray, per_axis: int) -> tuple:
    """Interpolated position, label and score for global lattice edges.

    An edge id encodes (axis, base voxel); the vertex sits where the signed
    distance crosses zero between the two end voxels. Label and score come
    from the endpoint with the smaller |tsdf| (the voxel nearest the
    surface); ties take the base endpoint.
    """
    dims = volume.config.dims
    axis = edge_ids // per_axis
    base_flat = edge_ids % per_axis

    y_dim, z_dim = dims[1], dims[2]
    bz = base_flat % z_dim
    by = (base_flat // z_dim) % y_dim
    bx = base_flat // (y_dim * z_dim)
    base = np.stack([bx, by, bz], axis=1)

    step = np.zeros_like(base)
    step[np.arange(len(axis)), axis] = 1
    far = base + step

    tsdf_flat = volume.tsdf.reshape(-1).astype(np.float32)
    flat_base = (base[:, 0] * y_dim + base[:, 1]) * z_dim + base[:, 2]
    flat_far = (far[:, 0] * y_dim + far[:, 1]) * z_dim + far[:, 2]
    a = tsdf_flat[flat_base].astype(np.float64)
    b = tsdf_flat[flat_far].astype(np.float64)

    # zero crossing of a + t * (b - a); referenced edges always change sign
    denom = a - b
    t = np.where(denom != 0, a / np.where(denom == 0, 1.0, denom), 0.5)
    t = np.clip(t, 0.0, 1.0)

    pos = base.astype(np.float64)
    pos[np.arange(len(axis)), axis] += t
    verts = volume.voxel_to_world(pos)

    near_base = np.abs(a) <= np.abs(b)
    pick = np.where(near_base, flat_base, flat_far)
    labels = volume.label.reshape(-1)[pick]
    scores = volume.score.reshape(-1)[pick].astype(np.float32)
    return verts, labels, scores


def marching_cubes(volume: VoxelVolume, weight_threshold: float = 0.0) -> TriMesh:
    """Extract the zero-crossing surface of the volume's signed distance.

    `weight_threshold` is the outlier filter: corners need weight > 0 and
    weight >= threshold. Returns an empty mesh when nothing qualifies.
    """
    if weight_threshold < 0:
        raise ConfigError("weight threshold must be >= 0")
    dims = volume.config.dims
    if min(dims) < 2:
        return TriMesh.empty()

    weight = volume.weight.astype(np.float32)
    known = (weight > 0) & (weight >= weight_threshold)
    cell_ok = (known[:-1, :-1, :-1] & known[1:, :-1, :-1]
               & known[1:, 1:, :-1] & known[:-1, 1:, :-1]
               & known[:-1, :-1, 1:] & known[1:, :-1, 1:]
               & known[1:, 1:, 1:] & known[:-1, 1:, 1:])
    if not cell_ok.any():
        return TriMesh.empty()

    inside = volume.tsdf.astype(np.float32) < 0
    case = np.zeros(tuple(d - 1 for d in dims), dtype=np.uint16)
    for bit, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
        xe, ye, ze = dims[0] - 1, dims[1] - 1, dims[2] - 1
        case |= inside[dx:dx + xe, dy:dy + ye, dz:dz + ze].astype(np.uint16) << bit

    active = cell_ok & (EDGE_TABLE[case] != 0)
    cx, cy, cz = np.nonzero(active)  # C order == z-fastest scan order
    if cx.size == 0:
        return TriMesh.empty()
    cell_case = case[cx, cy, cz]

    # expand each active cell into its triangles' edge slots
    ntri = TRI_COUNT[cell_case].astype(np.int64)
    tri_edges = TRI_TABLE[cell_case]  # (C, 15) local edge ids, -1 padded
    slot_mask = np.arange(15)[None, :] < (ntri * 3)[:, None]
    cell_of_slot = np.repeat(np.arange(cx.size), 15).reshape(-1, 15)[slot_mask]
    local_edge = tri_edges[slot_mask]

    # global lattice edge id: axis * per_axis + flat(base voxel)
    y_dim, z_dim = dims[1], dims[2]
    per_axis = dims[0] * y_dim * z_dim
    ebase = _EDGE_BASE[local_edge]
    ex = cx[cell_of_slot] + ebase[:, 0]
    ey = cy[cell_of_slot] + ebase[:, 1]
    ez = cz[cell_of_slot] + ebase[:, 2]
    edge_id = _EDGE_AXIS[local_edge] * per_axis + (ex * y_dim + ey) * z_dim + ez

    uniq_edges, vert_index = np.unique(edge_id, return_inverse=True)
    verts, labels, scores = _edge_vertex_data(volume, uniq_edges, per_axis)

    triangles = vert_index.reshape(-1, 3)
    # flip winding so triangle normals point toward positive signed distance
    triangles = triangles[:, [0, 2, 1]]
    return TriMesh(verts, triangles, labels, scores)
