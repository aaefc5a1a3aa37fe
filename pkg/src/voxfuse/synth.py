"""Analytic test worlds: exact SDF primitives, sphere-traced depth/label
renders, controlled sensor noise, ground-truth volume baking, and camera
trajectories. These provide the independent oracles the test suite fuses
against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

from .errors import ConfigError, DataFormatError
from .frames import DepthFrame, LabelFrame
from .geometry import Intrinsics, Pose, pixel_direction_grid
from .volume import VolumeConfig, VoxelVolume, new_volume

HIT_EPSILON = 1e-6  # sphere tracing convergence, meters
MAX_MARCH_STEPS = 512


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    class_id: int

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - np.array(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Plane:
    """Half-space solid; the normal points into free space."""

    point: tuple
    normal: tuple
    class_id: int

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ConfigError("plane normal must be nonzero")
        object.__setattr__(self, "normal", tuple(n / norm))

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return (points - np.array(self.point)) @ np.array(self.normal)


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    class_id: int

    def sdf(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - np.array(self.center)) - np.array(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Room:
    """Hollow box: free space inside, solid walls outside (inverted box)."""

    center: tuple
    half_extents: tuple
    class_id: int

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return -Box(self.center, self.half_extents, self.class_id).sdf(points)


_SHAPES = {"sphere": Sphere, "plane": Plane, "box": Box, "room": Room}


@dataclass
class AnalyticScene:
    """Min-union of primitives with exact signed distance."""

    primitives: list

    def __post_init__(self):
        if not self.primitives:
            raise ConfigError("scene needs at least one primitive")
        for p in self.primitives:
            if p.class_id < 1:
                raise ConfigError("primitive class ids start at 1")

    def sdf(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        stack = np.stack([p.sdf(pts) for p in self.primitives], axis=0)
        return stack.min(axis=0)

    def sdf_and_label(self, points) -> tuple:
        """Distance plus the class of the nearest primitive (ties: lowest index)."""
        pts = np.asarray(points, dtype=np.float64)
        stack = np.stack([p.sdf(pts) for p in self.primitives], axis=0)
        nearest = np.argmin(stack, axis=0)
        classes = np.array([p.class_id for p in self.primitives], dtype=np.uint8)
        return stack.min(axis=0), classes[nearest]

    def class_count(self) -> int:
        return max(p.class_id for p in self.primitives) + 1

    def bounds(self, margin: float = 0.0):
        """Axis-aligned bounds of the bounded primitives, or None if none exist."""
        lo, hi = [], []
        for p in self.primitives:
            if isinstance(p, Sphere):
                c, r = np.array(p.center), p.radius
                lo.append(c - r)
                hi.append(c + r)
            elif isinstance(p, (Box, Room)):
                c, h = np.array(p.center), np.array(p.half_extents)
                lo.append(c - h)
                hi.append(c + h)
        if not lo:
            return None
        return np.min(lo, axis=0) - margin, np.max(hi, axis=0) + margin


@dataclass(frozen=True)
class NoiseModel:
    """Deterministic synthetic depth corruption, seeded per frame."""

    gaussian_sigma: float = 0.0
    depth_scaled: bool = False  # sigma grows with depth squared
    outlier_rate: float = 0.0
    outlier_magnitude: float = 0.1
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("outlier_rate", "dropout_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.gaussian_sigma < 0 or self.outlier_magnitude < 0:
            raise ConfigError("noise magnitudes must be >= 0")


def render_depth(scene: AnalyticScene, intrinsics: Intrinsics, pose: Pose,
                 max_range: float = 10.0, frame_index: int = 0) -> tuple:
    """Sphere-trace the scene; returns (DepthFrame, LabelFrame).

    Depth is z-depth in meters; pixels whose ray escapes `max_range` (or
    fails to converge) are invalid (depth 0, label 0). Label scores are 1.
    """
    if float(scene.sdf(pose.translation)) <= 0:
        raise ConfigError("camera is inside a solid region")

    dirs_cam = pixel_direction_grid(intrinsics)
    norms = np.linalg.norm(dirs_cam, axis=-1)
    dirs_world = ((dirs_cam / norms[..., None]) @ pose.rotation.T).reshape(-1, 3)
    origin = pose.translation

    n = dirs_world.shape[0]
    t = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(MAX_MARCH_STEPS):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        pts = origin + t[idx, None] * dirs_world[idx]
        d = scene.sdf(pts)
        converged = d < HIT_EPSILON
        hit[idx[converged]] = True
        alive[idx[converged]] = False
        t[idx] += d
        escaped = t[idx] > max_range
        alive[idx[escaped]] = False

    labels = np.zeros(n, dtype=np.uint8)
    if np.any(hit):
        pts = origin + t[hit, None] * dirs_world[hit]
        _, lab = scene.sdf_and_label(pts)
        labels[hit] = lab

    # convert marched ray length to z-depth
    z = np.where(hit, t / norms.reshape(-1), 0.0)
    shape = (intrinsics.height, intrinsics.width)
    depth_frame = DepthFrame(z.reshape(shape).astype(np.float32), index=frame_index)
    scores = np.where(labels > 0, 1.0, 0.0).astype(np.float32)
    label_frame = LabelFrame(labels.reshape(shape), scores.reshape(shape),
                             class_count=scene.class_count())
    return depth_frame, label_frame


def apply_noise(depth_frame: DepthFrame, model: NoiseModel) -> DepthFrame:
    """Corrupt a depth frame: Gaussian jitter, signed outliers, dropout.

    Deterministic per (model.seed, frame index); invalid pixels stay invalid
    and noisy depths pushed to or below zero become invalid.
    """
    rng = np.random.default_rng((int(model.seed), int(depth_frame.index)))
    depth = depth_frame.depth.astype(np.float64).copy()
    valid = depth > 0

    if model.gaussian_sigma > 0:
        sigma = model.gaussian_sigma * (depth ** 2 if model.depth_scaled else 1.0)
        noise = rng.normal(0.0, 1.0, size=depth.shape) * sigma
        depth = np.where(valid, depth + noise, depth)
    if model.outlier_rate > 0:
        pick = (rng.random(depth.shape) < model.outlier_rate) & valid
        sign = np.where(rng.random(depth.shape) < 0.5, -1.0, 1.0)
        depth = np.where(pick, depth + sign * model.outlier_magnitude, depth)
    if model.dropout_rate > 0:
        drop = (rng.random(depth.shape) < model.dropout_rate) & valid
        depth = np.where(drop, 0.0, depth)

    depth[depth < 0] = 0.0
    return DepthFrame(depth.astype(np.float32), index=depth_frame.index)


def bake_gt_volume(scene: AnalyticScene, config: VolumeConfig) -> VoxelVolume:
    """Evaluate the exact scene SDF at every voxel center.

    The result has clamped signed distance everywhere, weight 1 everywhere,
    and labels (score 1) on voxels within the truncation band of a surface.
    """
    volume = new_volume(config)
    x_dim, y_dim, z_dim = config.dims
    ys, zs = np.meshgrid(np.arange(y_dim), np.arange(z_dim), indexing="ij")
    tau = config.truncation
    for ix in range(x_dim):  # slab by slab to bound memory
        coords = np.stack([np.full_like(ys, ix), ys, zs], axis=-1).reshape(-1, 3)
        centers = volume.voxel_to_world(coords)
        sdf, labels = scene.sdf_and_label(centers)
        in_band = np.abs(sdf) <= tau
        volume.tsdf[ix] = np.clip(sdf, -tau, tau).reshape(y_dim, z_dim).astype(config.float_dtype)
        volume.label[ix] = np.where(in_band, labels, 0).reshape(y_dim, z_dim)
        volume.score[ix] = np.where(in_band, 1.0, 0.0).reshape(y_dim, z_dim).astype(config.float_dtype)
    volume.weight[...] = 1
    volume.class_count = scene.class_count()
    return volume


def trajectory(kind: str, **params) -> list:
    """Deterministic camera paths: orbit, line, or room_scan."""
    if kind == "orbit":
        return _orbit(**params)
    if kind == "line":
        return _line(**params)
    if kind == "room_scan":
        return _room_scan(**params)
    raise ConfigError(f"unknown trajectory kind {kind!r}")


def _orbit(center=(0.0, 0.0, 0.0), radius=1.5, frames=24,
           elevation_deg=30.0, elevation_cycles=2, start_angle_deg=0.0) -> list:
    if radius <= 0 or frames < 1:
        raise ConfigError("orbit needs radius > 0 and frames >= 1")
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(frames):
        theta = np.radians(start_angle_deg) + 2 * np.pi * k / frames
        phi = np.radians(elevation_deg) * np.sin(elevation_cycles * 2 * np.pi * k / frames)
        eye = center + radius * np.array(
            [np.cos(theta) * np.cos(phi), np.sin(theta) * np.cos(phi), np.sin(phi)]
        )
        poses.append(Pose.look_at(eye, center))
    return poses


def _line(start, end, frames=24, target=(0.0, 0.0, 0.0)) -> list:
    if frames < 1:
        raise ConfigError("line needs frames >= 1")
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    steps = np.linspace(0.0, 1.0, frames)
    return [Pose.look_at(start + s * (end - start), target) for s in steps]


def _room_scan(center=(0.0, 0.0, 0.0), radius=0.4, height=0.0, frames=36,
               pitch_deg=40.0, pitch_cycles=2) -> list:
    """Spin in place near the room center, looking outward with a pitch sweep."""
    if frames < 1:
        raise ConfigError("room_scan needs frames >= 1")
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(frames):
        theta = 2 * np.pi * k / frames
        phi = np.radians(pitch_deg) * np.sin(pitch_cycles * 2 * np.pi * k / frames + 0.5)
        eye = center + np.array([radius * np.cos(theta), radius * np.sin(theta), height])
        look = np.array(
            [np.cos(theta) * np.cos(phi), np.sin(theta) * np.cos(phi), np.sin(phi)]
        )
        poses.append(Pose.look_at(eye, eye + look))
    return poses


# --- scene description files -------------------------------------------------
#
# A scene file is YAML with the sections:
#   primitives: list of {shape, class_id, shape parameters}
#   camera:     {width, height, fov_deg} or {width, height, fx, fy, cx, cy}
#   trajectory: {kind, <kind parameters>}
#   noise:      optional NoiseModel fields
#   volume:     optional {voxel_size, truncation, margin | dims+origin, ...}
# Unknown keys are rejected.

_PRIM_FIELDS = {
    "sphere": {"center", "radius", "class_id"},
    "plane": {"point", "normal", "class_id"},
    "box": {"center", "half_extents", "class_id"},
    "room": {"center", "half_extents", "class_id"},
}


def _check_keys(mapping: dict, allowed, where: str, path) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise DataFormatError(path, f"unknown keys in {where}: {sorted(unknown)}")


def load_scene(path) -> dict:
    """Parse and validate a scene description file.

    Returns a dict with keys: scene (AnalyticScene), intrinsics, trajectory
    (list of Pose), noise (NoiseModel or None), volume (dict of overrides).
    """
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise
    except yaml.YAMLError as e:
        raise DataFormatError(path, f"invalid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise DataFormatError(path, "scene file must be a mapping")
    _check_keys(raw, {"primitives", "camera", "trajectory", "noise", "volume"},
                "scene file", path)

    prims = raw.get("primitives")
    if not prims:
        raise DataFormatError(path, "scene file needs a non-empty 'primitives' list")
    primitives = []
    for i, spec in enumerate(prims):
        shape = spec.get("shape")
        if shape not in _SHAPES:
            raise DataFormatError(path, f"primitive {i}: unknown shape {shape!r}")
        _check_keys(spec, _PRIM_FIELDS[shape] | {"shape"}, f"primitive {i}", path)
        kwargs = {k: v for k, v in spec.items() if k != "shape"}
        try:
            primitives.append(_SHAPES[shape](**kwargs))
        except (TypeError, ConfigError) as e:
            raise DataFormatError(path, f"primitive {i}: {e}") from e
    scene = AnalyticScene(primitives)

    cam = raw.get("camera") or {}
    _check_keys(cam, {"width", "height", "fov_deg", "fx", "fy", "cx", "cy"}, "camera", path)
    width = int(cam.get("width", 256))
    height = int(cam.get("height", 256))
    if "fx" in cam:
        intrinsics = Intrinsics(cam["fx"], cam.get("fy", cam["fx"]),
                                cam.get("cx", (width - 1) / 2), cam.get("cy", (height - 1) / 2),
                                width, height)
    else:
        intrinsics = Intrinsics.from_fov(width, height, float(cam.get("fov_deg", 60.0)))

    traj_spec = dict(raw.get("trajectory") or {"kind": "orbit"})
    params = {k: v for k, v in traj_spec.items() if k != "kind"}
    try:
        poses = trajectory(traj_spec.get("kind", "orbit"), **params)
    except TypeError as e:
        raise DataFormatError(path, f"trajectory: {e}") from e

    noise = None
    if raw.get("noise"):
        try:
            noise = NoiseModel(**raw["noise"])
        except (TypeError, ConfigError) as e:
            raise DataFormatError(path, f"noise: {e}") from e

    volume = dict(raw.get("volume") or {})
    _check_keys(volume, {"voxel_size", "truncation", "margin", "dims", "origin",
                         "storage_precision", "max_weight"}, "volume", path)
    return {"scene": scene, "intrinsics": intrinsics, "trajectory": poses,
            "trajectory_spec": traj_spec, "noise": noise, "volume": volume}


def volume_config_for_scene(scene: AnalyticScene, overrides: dict | None = None,
                            window_size: int = 9) -> VolumeConfig:
    """Build a VolumeConfig covering the scene.

    Bounded primitives define the extent (plus the truncation band, the
    extraction window reach, and an optional margin); scenes of planes only
    must specify dims and origin explicitly.
    """
    overrides = dict(overrides or {})
    voxel_size = float(overrides.pop("voxel_size", 0.01))
    truncation = float(overrides.pop("truncation", max(0.05, voxel_size)))
    margin = float(overrides.pop("margin", 0.0))
    if "dims" in overrides and "origin" in overrides:
        return VolumeConfig(dims=tuple(overrides.pop("dims")),
                            origin=tuple(overrides.pop("origin")),
                            voxel_size=voxel_size, truncation=truncation, **overrides)
    bounds = scene.bounds()
    if bounds is None:
        raise ConfigError(
            "scene has no bounded primitive; specify volume dims and origin explicitly"
        )
    pad = truncation + window_size * voxel_size + margin
    lo, hi = bounds[0] - pad, bounds[1] + pad
    dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size)) + 1 for i in range(3))
    return VolumeConfig(dims=dims, origin=tuple(lo), voxel_size=voxel_size,
                        truncation=truncation, **overrides)
