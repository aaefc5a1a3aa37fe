"""Dataset ingestion, mesh/volume serialization, and run configuration.

File conventions:

* depth: 16-bit single-channel PNG, meters = raw / depth_scale, raw 0 invalid
* labels: 8-bit single-channel PNG; raw 255 means "unlabeled" and maps to
  internal id 0, any other raw id maps to raw + 1 (internal ids reserve 0)
* scores: optional 8-bit PNG, score = raw / 255; absent means score 1.0
* trajectory: text, one pose per line, either 16 numbers (4x4 row-major) or
  7 numbers (tx ty tz qx qy qz qw)
* mesh: binary little-endian PLY with per-vertex color, label, and score
* volume checkpoint: "VXF1" binary, bit-exact round-trip

Every loader rejects malformed input with an error naming the path and the
violated expectation.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigError, DataFormatError
from .frames import DepthFrame, LabelFrame
from .geometry import Intrinsics, Pose
from .meshing import TriMesh
from .volume import DEFAULT_MEMORY_BUDGET, VolumeConfig, VoxelVolume, new_volume

DEFAULT_DEPTH_SCALE = 1000.0  # millimeter-stored depth

_DEPTH_MODES = {"I", "I;16", "I;16B", "I;16L"}


# --- image frames --------------------------------------------------------------

def load_depth(path, scale: float = DEFAULT_DEPTH_SCALE, index: int = 0) -> DepthFrame:
    """Read a 16-bit single-channel depth image; raw 0 stays invalid (0 m)."""
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise DataFormatError(path, f"unreadable image: {e}") from e
    if img.mode not in _DEPTH_MODES:
        raise DataFormatError(path, f"expected 16-bit single-channel depth, got mode {img.mode!r}")
    raw = np.asarray(img)
    if raw.ndim != 2:
        raise DataFormatError(path, f"expected single channel, got shape {raw.shape}")
    if raw.min() < 0 or raw.max() > 0xFFFF:
        raise DataFormatError(path, "pixel values outside the 16-bit range")
    return DepthFrame((raw.astype(np.float64) / scale).astype(np.float32), index=index)


def write_depth(frame: DepthFrame, path, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    raw = np.clip(np.rint(frame.depth.astype(np.float64) * scale), 0, 0xFFFF).astype(np.uint16)
    Image.fromarray(raw).save(path)


def load_labels(path, score_path=None, class_count: int = 0, index: int = 0) -> LabelFrame:
    """Read an 8-bit label image (+ optional 8-bit score image).

    Raw 255 is the dataset's "unlabeled" and maps to internal 0 with score
    0; other raw ids shift up by one. Missing score image means score 1.0.
    """
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise DataFormatError(path, f"unreadable image: {e}") from e
    if img.mode != "L":
        raise DataFormatError(path, f"expected 8-bit single-channel labels, got mode {img.mode!r}")
    raw = np.asarray(img)
    labels = np.where(raw == 255, 0, raw.astype(np.uint16) + 1).astype(np.uint8)

    if score_path is not None:
        simg = Image.open(score_path)
        if simg.mode != "L":
            raise DataFormatError(score_path, f"expected 8-bit scores, got mode {simg.mode!r}")
        sraw = np.asarray(simg)
        if sraw.shape != raw.shape:
            raise DataFormatError(score_path, "score image shape differs from label image")
        scores = (sraw.astype(np.float32) / 255.0)
    else:
        scores = np.ones_like(labels, dtype=np.float32)
    scores = np.where(labels == 0, np.float32(0.0), scores)
    return LabelFrame(labels, scores, class_count=class_count)


def write_labels(frame: LabelFrame, path, score_path=None) -> None:
    raw = np.where(frame.labels == 0, 255, frame.labels.astype(np.int16) - 1).astype(np.uint8)
    Image.fromarray(raw, mode="L").save(path)
    if score_path is not None:
        sraw = np.clip(np.rint(frame.scores * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(sraw, mode="L").save(score_path)


# --- trajectories ---------------------------------------------------------------

def _quat_to_rotation(qx, qy, qz, qw) -> np.ndarray:
    n = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def load_trajectory(path, convention: str = "cam_to_world") -> list:
    """Read poses, one per line; validates and re-orthonormalizes rotations.

    `convention` declares what the file stores; world_to_cam files are
    inverted on load so the result is always camera-to-world.
    """
    if convention not in ("cam_to_world", "world_to_cam"):
        raise ConfigError(f"unknown pose convention {convention!r}")
    poses = []
    with open(path) as f:
        lines = [ln for ln in (line.strip() for line in f)
                 if ln and not ln.startswith("#")]
    for i, line in enumerate(lines):
        tokens = line.split()
        try:
            values = [float(t) for t in tokens]
        except ValueError as e:
            raise DataFormatError(path, f"frame {i}: non-numeric token ({e})") from e
        if len(values) == 16:
            m = np.array(values).reshape(4, 4)
            rot, trans = m[:3, :3], m[:3, 3]
            if abs(m[3, 0]) + abs(m[3, 1]) + abs(m[3, 2]) > 1e-9 or abs(m[3, 3] - 1) > 1e-6:
                raise DataFormatError(path, f"frame {i}: last matrix row must be 0 0 0 1")
        elif len(values) == 7:
            tx, ty, tz, qx, qy, qz, qw = values
            try:
                rot = _quat_to_rotation(qx, qy, qz, qw)
            except ValueError as e:
                raise DataFormatError(path, f"frame {i}: {e}") from e
            trans = np.array([tx, ty, tz])
        else:
            raise DataFormatError(
                path, f"frame {i}: expected 16 (matrix) or 7 (position+quaternion) "
                      f"numbers, got {len(values)}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise DataFormatError(path, f"frame {i}: non-finite pose")
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err > 1e-4 or np.linalg.det(rot) <= 0:
            raise DataFormatError(
                path, f"frame {i}: rotation not orthonormal (error {err:.2e})")
        pose = Pose(_nearest_rotation(rot), trans)
        if convention == "world_to_cam":
            pose = pose.inverse()
        poses.append(pose)
    return poses


def save_trajectory(poses, path) -> None:
    """Write camera-to-world poses as 4x4 row-major matrices, full precision."""
    with open(path, "w") as f:
        for pose in poses:
            f.write(" ".join(f"{v:.17g}" for v in pose.matrix().reshape(-1)) + "\n")


# --- meshes ----------------------------------------------------------------------

def class_palette(class_count: int = 256) -> np.ndarray:
    """The fixed class color table: (class_count, 3) uint8, id 0 is black."""
    ids = np.arange(class_count, dtype=np.uint64)
    x = ids
    for _ in range(2):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
        x ^= x >> np.uint64(31)
    rgb = np.stack([(x >> np.uint64(s)).astype(np.uint8) for s in (0, 8, 16)], axis=1)
    rgb = 64 + (rgb % 192)  # keep colors readable
    rgb[0] = 0
    return rgb.astype(np.uint8)


_PLY_VERTEX_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("label", "u1"), ("score", "<f4"),
])
_PLY_FACE_DTYPE = np.dtype([("n", "u1"), ("i", "<i4", (3,))])


def write_mesh_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY with color (from the class palette), label,
    and score per vertex."""
    palette = class_palette()
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar label\nproperty float score\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    verts = np.empty(len(mesh.vertices), dtype=_PLY_VERTEX_DTYPE)
    v32 = mesh.vertices.astype(np.float32)
    verts["x"], verts["y"], verts["z"] = v32[:, 0], v32[:, 1], v32[:, 2]
    colors = palette[mesh.vertex_labels]
    verts["red"], verts["green"], verts["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    verts["label"] = mesh.vertex_labels
    verts["score"] = mesh.vertex_scores
    faces = np.empty(len(mesh.triangles), dtype=_PLY_FACE_DTYPE)
    faces["n"] = 3
    faces["i"] = mesh.triangles.astype(np.int32)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())
        f.write(faces.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}


def load_mesh_ply(path) -> TriMesh:
    """Read a binary little-endian PLY (any vertex layout containing x/y/z)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise DataFormatError(path, "not a PLY file")
    header_lines = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    if not any(ln.strip() == "format binary_little_endian 1.0" for ln in header_lines):
        raise DataFormatError(path, "only binary little-endian PLY is supported")

    elements = []  # (name, count, [(prop_name, dtype_str)] or list spec)
    current = None
    for ln in header_lines:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            current = {"name": parts[1], "count": int(parts[2]), "props": []}
            elements.append(current)
        elif parts[0] == "property" and current is not None:
            if parts[1] == "list":
                current["props"].append(("list", parts[2], parts[3], parts[4]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise DataFormatError(path, f"unsupported property type {parts[1]!r}")
                current["props"].append(("scalar", parts[1], parts[2]))

    verts = tris = None
    labels = scores = None
    offset = 0
    for el in elements:
        if el["name"] == "vertex":
            fields = []
            for p in el["props"]:
                if p[0] != "scalar":
                    raise DataFormatError(path, "list property on vertices is unsupported")
                fields.append((p[2], _PLY_TYPES[p[1]]))
            dt = np.dtype(fields)
            raw = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            offset += dt.itemsize * el["count"]
            names = raw.dtype.names
            if not {"x", "y", "z"} <= set(names):
                raise DataFormatError(path, "vertex element lacks x/y/z")
            verts = np.stack([raw["x"], raw["y"], raw["z"]], axis=1).astype(np.float64)
            labels = raw["label"].astype(np.uint8) if "label" in names else None
            scores = raw["score"].astype(np.float32) if "score" in names else None
        elif el["name"] == "face":
            spec = el["props"][0]
            if spec[0] != "list":
                raise DataFormatError(path, "face element must be a list property")
            cnt_dt, idx_dt = _PLY_TYPES[spec[1]], _PLY_TYPES[spec[2]]
            face_dt = np.dtype([("n", cnt_dt), ("i", idx_dt, (3,))])
            raw = np.frombuffer(body, dtype=face_dt, count=el["count"], offset=offset)
            offset += face_dt.itemsize * el["count"]
            if el["count"] and not np.all(raw["n"] == 3):
                raise DataFormatError(path, "only triangle faces are supported")
            tris = raw["i"].astype(np.int64)
        else:
            raise DataFormatError(path, f"unsupported element {el['name']!r}")
    if verts is None:
        raise DataFormatError(path, "no vertex element")
    if tris is None:
        tris = np.empty((0, 3), np.int64)
    return TriMesh(verts, tris, labels, scores)


# --- volume checkpoints -----------------------------------------------------------

_VXF_MAGIC = b"VXF1"
_VXF_HEADER = struct.Struct("<III d 3d d B H")


def save_volume(volume: VoxelVolume, path) -> None:
    cfg = volume.config
    header = _VXF_HEADER.pack(
        *cfg.dims, cfg.voxel_size, *cfg.origin, cfg.truncation,
        0 if cfg.storage_precision == "half" else 1,
        volume.class_count,
    )
    with open(path, "wb") as f:
        f.write(_VXF_MAGIC)
        f.write(header)
        for grid in (volume.tsdf, volume.weight, volume.label, volume.score):
            f.write(np.ascontiguousarray(grid).tobytes())


def load_volume(path, memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET) -> VoxelVolume:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _VXF_MAGIC:
            raise DataFormatError(path, f"bad magic {magic!r}, expected {_VXF_MAGIC!r}")
        try:
            x, y, z, voxel_size, ox, oy, oz, truncation, prec, classes = \
                _VXF_HEADER.unpack(f.read(_VXF_HEADER.size))
        except struct.error as e:
            raise DataFormatError(path, f"truncated header: {e}") from e
        precision = "half" if prec == 0 else "single"
        try:
            cfg = VolumeConfig(dims=(x, y, z), voxel_size=voxel_size,
                               origin=(ox, oy, oz), truncation=truncation,
                               storage_precision=precision,
                               memory_budget_bytes=memory_budget_bytes)
        except ConfigError as e:
            raise DataFormatError(path, f"invalid header: {e}") from e
        volume = new_volume(cfg)
        volume.class_count = classes
        fdt = np.dtype(cfg.float_dtype).newbyteorder("<")
        n = cfg.voxel_count
        for name, dt in (("tsdf", fdt), ("weight", fdt), ("label", np.dtype("u1")),
                         ("score", fdt)):
            buf = f.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise DataFormatError(path, f"truncated {name} grid")
            getattr(volume, name)[...] = np.frombuffer(buf, dtype=dt).reshape(cfg.dims)
        if f.read(1):
            raise DataFormatError(path, "trailing bytes after grids")
    return volume


# --- frame records and run configuration -------------------------------------------

@dataclass
class FrameRecord:
    depth_path: Path
    pose: Pose
    index: int
    label_path: Path | None = None
    score_path: Path | None = None


@dataclass
class RunConfig:
    volume: VolumeConfig
    intrinsics: Intrinsics
    window_size: int = 9
    outlier_weight_threshold: float = 2.0
    semantics_enabled: bool = True
    depth_scale: float = DEFAULT_DEPTH_SCALE
    pose_convention: str = "cam_to_world"
    depth_interpretation: str = "z"  # or "ray"
    fscore_threshold: float = 0.01
    sample_density: float = 1e5
    iou_cutoff_factor: float = 2.0
    class_names: list | None = None

    def __post_init__(self):
        if self.pose_convention not in ("cam_to_world", "world_to_cam"):
            raise ConfigError(f"unknown pose convention {self.pose_convention!r}")
        if self.depth_interpretation not in ("z", "ray"):
            raise ConfigError(f"depth_interpretation must be 'z' or 'ray'")

    def class_name(self, class_id: int) -> str:
        if self.class_names and 0 <= class_id < len(self.class_names):
            return str(self.class_names[class_id])
        return f"class_{class_id}"


_TOP_KEYS = {"volume", "camera", "fusion", "dataset", "metrics", "class_names"}
_VOLUME_KEYS = {"dims", "voxel_size", "origin", "truncation", "storage_precision",
                "max_weight", "memory_budget_bytes"}
_CAMERA_KEYS = {"fx", "fy", "cx", "cy", "width", "height"}
_FUSION_KEYS = {"window_size", "outlier_weight_threshold", "semantics_enabled"}
_DATASET_KEYS = {"depth_scale", "pose_convention", "depth_interpretation"}
_METRIC_KEYS = {"fscore_threshold", "sample_density", "iou_cutoff_factor"}


def _reject_unknown(section: dict, allowed: set, name: str, path) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise DataFormatError(path, f"unknown keys in {name}: {sorted(unknown)}")


def load_run_config(path) -> RunConfig:
    """Parse and strictly validate a run configuration file."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise
    except yaml.YAMLError as e:
        raise DataFormatError(path, f"invalid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise DataFormatError(path, "config must be a mapping")
    _reject_unknown(raw, _TOP_KEYS, "config", path)
    for key in ("volume", "camera"):
        if key not in raw:
            raise DataFormatError(path, f"missing required section '{key}'")

    vol = dict(raw["volume"])
    _reject_unknown(vol, _VOLUME_KEYS, "volume", path)
    cam = dict(raw["camera"])
    _reject_unknown(cam, _CAMERA_KEYS, "camera", path)
    fus = dict(raw.get("fusion") or {})
    _reject_unknown(fus, _FUSION_KEYS, "fusion", path)
    ds = dict(raw.get("dataset") or {})
    _reject_unknown(ds, _DATASET_KEYS, "dataset", path)
    met = dict(raw.get("metrics") or {})
    _reject_unknown(met, _METRIC_KEYS, "metrics", path)

    try:
        vol["dims"] = tuple(vol["dims"])
        if "origin" in vol:
            vol["origin"] = tuple(vol["origin"])
        volume = VolumeConfig(**vol)
        intrinsics = Intrinsics(**cam)
        return RunConfig(volume=volume, intrinsics=intrinsics,
                         class_names=raw.get("class_names"), **fus, **ds, **met)
    except (ConfigError, TypeError, KeyError) as e:
        raise DataFormatError(path, f"invalid config: {e}") from e


def save_run_config(config: RunConfig, path) -> None:
    cfg = config.volume
    doc = {
        "volume": {
            "dims": [int(d) for d in cfg.dims], "voxel_size": float(cfg.voxel_size),
            "origin": [float(x) for x in cfg.origin],
            "truncation": float(cfg.truncation),
            "storage_precision": cfg.storage_precision,
        },
        "camera": {
            "fx": float(config.intrinsics.fx), "fy": float(config.intrinsics.fy),
            "cx": float(config.intrinsics.cx), "cy": float(config.intrinsics.cy),
            "width": int(config.intrinsics.width),
            "height": int(config.intrinsics.height),
        },
        "fusion": {
            "window_size": int(config.window_size),
            "outlier_weight_threshold": float(config.outlier_weight_threshold),
            "semantics_enabled": bool(config.semantics_enabled),
        },
        "dataset": {
            "depth_scale": float(config.depth_scale),
            "pose_convention": config.pose_convention,
            "depth_interpretation": config.depth_interpretation,
        },
        "metrics": {
            "fscore_threshold": float(config.fscore_threshold),
            "sample_density": float(config.sample_density),
            "iou_cutoff_factor": float(config.iou_cutoff_factor),
        },
    }
    if cfg.max_weight is not None:
        doc["volume"]["max_weight"] = float(cfg.max_weight)
    if config.class_names:
        doc["class_names"] = list(config.class_names)
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def discover_frames(root) -> list:
    """Enumerate a dataset directory into ordered FrameRecords.

    Expects depth/NNNNNN.png plus trajectory.txt; labels/ and scores/ are
    matched by filename when present.
    """
    root = Path(root)
    depth_dir = root / "depth"
    if not depth_dir.is_dir():
        raise DataFormatError(root, "dataset has no depth/ directory")
    depth_files = sorted(depth_dir.glob("*.png"))
    if not depth_files:
        raise DataFormatError(depth_dir, "no depth frames (*.png)")
    traj_path = root / "trajectory.txt"
    if not traj_path.is_file():
        raise FileNotFoundError(f"missing trajectory file {traj_path}")
    config = load_run_config(root / "config.yaml") if (root / "config.yaml").is_file() else None
    convention = config.pose_convention if config else "cam_to_world"
    poses = load_trajectory(traj_path, convention)
    if len(poses) != len(depth_files):
        raise DataFormatError(
            traj_path, f"{len(poses)} poses for {len(depth_files)} depth frames")

    records = []
    for i, dp in enumerate(depth_files):
        lp = root / "labels" / dp.name
        sp = root / "scores" / dp.name
        records.append(FrameRecord(
            depth_path=dp, pose=poses[i], index=i,
            label_path=lp if lp.is_file() else None,
            score_path=sp if sp.is_file() else None,
        ))
    return records


def ray_depth_to_z(depth: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Convert ray-length depth to z-depth for datasets storing ray lengths."""
    from .geometry import pixel_direction_grid

    norms = np.linalg.norm(pixel_direction_grid(intrinsics), axis=-1)
    return (depth / norms).astype(np.float32)


class FrameStream:
    """Order-preserving background prefetch of dataset frames.

    Yields (record, DepthFrame, LabelFrame | None). The loader thread stays
    at most `prefetch` frames ahead of the consumer.
    """

    def __init__(self, records, config: RunConfig | None = None, prefetch: int = 4):
        self.records = list(records)
        self.config = config
        self.queue: queue.Queue = queue.Queue(maxsize=max(1, prefetch))
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _load(self, rec: FrameRecord):
        scale = self.config.depth_scale if self.config else DEFAULT_DEPTH_SCALE
        depth = load_depth(rec.depth_path, scale=scale, index=rec.index)
        if self.config and self.config.depth_interpretation == "ray":
            depth = DepthFrame(ray_depth_to_z(depth.depth, self.config.intrinsics),
                               index=rec.index)
        labels = None
        if rec.label_path is not None:
            labels = load_labels(rec.label_path, rec.score_path, index=rec.index)
        return rec, depth, labels

    def _run(self):
        try:
            for rec in self.records:
                self.queue.put(("frame", self._load(rec)))
            self.queue.put(("done", None))
        except BaseException as e:  # surfaced to the consumer
            self.queue.put(("error", e))

    def __iter__(self):
        self._thread.start()
        while True:
            kind, payload = self.queue.get()
            if kind == "frame":
                yield payload
            elif kind == "done":
                return
            else:
                raise payload
