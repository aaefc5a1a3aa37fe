"""Pinhole camera model, rigid poses, and the world/pixel/ray mappings.

Conventions used throughout the package:

* Pixel coordinates are ``(u, v)`` with ``u`` along image columns and ``v``
  along rows; the principal point ``(cx, cy)`` is an exact pixel coordinate.
* Depth is z-depth: the distance along the optical axis, not the ray length.
  (Loaders convert ray-length datasets, see :mod:`voxfuse.io`.)
* Poses are camera-to-world. Camera frame: x right, y down, z forward.

Everything here is immutable after construction and free of hidden state, so
all functions are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    BehindCameraError,
    BoundsError,
    ConfigError,
    InvalidSampleError,
)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics (no distortion model)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        """Square-pixel intrinsics from a horizontal field of view."""
        fx = float((width / 2.0) / np.tan(np.radians(fov_x_deg) / 2.0))
        return cls(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)


def _as_rotation(matrix, tol: float) -> np.ndarray:
    r = np.asarray(matrix, dtype=np.float64)
    if r.shape != (3, 3):
        raise ConfigError(f"rotation must be 3x3, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ConfigError("rotation contains non-finite values")
    err = np.max(np.abs(r.T @ r - np.eye(3)))
    if err > tol or np.linalg.det(r) < 0:
        raise ConfigError(
            f"rotation is not orthonormal with det +1 (orthogonality error {err:.2e})"
        )
    r.setflags(write=False)
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    _ORTHO_TOL = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation, self._ORTHO_TOL))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ConfigError("translation contains non-finite values")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ConfigError(f"pose matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Pose positioned at `eye` with the optical axis through `target`."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ConfigError("look_at target coincides with eye")
        forward = forward / norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # optical axis parallel to up: fall back to an arbitrary horizontal
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
            if np.linalg.norm(right) < 1e-9:
                right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        return cls(rotation, eye)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Composition self * other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def transform(self, points) -> np.ndarray:
        """Map camera-frame points (..., 3) to world coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def transform_inverse(self, points) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    """A viewing ray through a pixel, in world coordinates."""

    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ConfigError("ray direction must be unit length")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def _check_pixels(u: np.ndarray, v: np.ndarray, intrinsics: Intrinsics) -> None:
    bad = (u < 0) | (u > intrinsics.width - 1) | (v < 0) | (v > intrinsics.height - 1)
    if np.any(bad):
        idx = np.argwhere(bad)
        raise BoundsError(
            f"pixel outside {intrinsics.width}x{intrinsics.height} image "
            f"(first offender at flat index {idx.ravel()[0] if idx.size else 0})"
        )


def unproject(pixel, depth, intrinsics: Intrinsics, pose: Pose) -> np.ndarray:
    """Back-project pixel(s) at z-depth `depth` to world points.

    `pixel` is (..., 2) in (u, v) order, `depth` broadcasts against its
    leading shape; returns (..., 3) world points.
    """
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise InvalidSampleError("depth must be positive")
    u, v = px[..., 0], px[..., 1]
    _check_pixels(u, v, intrinsics)
    x = (u - intrinsics.cx) / intrinsics.fx * d
    y = (v - intrinsics.cy) / intrinsics.fy * d
    z = np.broadcast_to(d, x.shape)
    return pose.transform(np.stack([x, y, z], axis=-1))


def project(point, intrinsics: Intrinsics, pose: Pose):
    """Project world point(s) (..., 3) to pixel coordinates and z-depth.

    Returns (u, v, z) arrays. Raises if any point lies at or behind the
    camera plane.
    """
    p_cam = pose.transform_inverse(point)
    z = p_cam[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point has non-positive depth in the camera frame")
    u = intrinsics.fx * p_cam[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * p_cam[..., 1] / z + intrinsics.cy
    return u, v, z


def pixel_ray(pixel, intrinsics: Intrinsics, pose: Pose) -> Ray:
    """The world-space viewing ray through a pixel center."""
    u, v = float(pixel[0]), float(pixel[1])
    _check_pixels(np.asarray(u), np.asarray(v), intrinsics)
    d_cam = np.array([(u - intrinsics.cx) / intrinsics.fx,
                      (v - intrinsics.cy) / intrinsics.fy,
                      1.0])
    d_world = pose.rotation @ (d_cam / np.linalg.norm(d_cam))
    return Ray(pose.translation, d_world, (pixel[0], pixel[1]))


def ray_samples(pixel, depth, intrinsics: Intrinsics, pose: Pose,
                window_size: int, voxel_size: float) -> np.ndarray:
    """Sample points along a pixel's viewing ray, centered on the surface.

    Returns (window_size, 3) world points spaced `voxel_size` apart along
    the ray; the middle sample is exactly the unprojected surface point.
    """
    if window_size % 2 == 0 or window_size < 1:
        raise ConfigError(f"window size must be odd and >= 1, got {window_size}")
    surface = unproject(pixel, depth, intrinsics, pose)
    direction = surface - pose.translation
    direction = direction / np.linalg.norm(direction)
    half = (window_size - 1) // 2
    offsets = (np.arange(window_size, dtype=np.float64) - half) * voxel_size
    return surface[None, :] + offsets[:, None] * direction[None, :]


@lru_cache(maxsize=16)
def pixel_direction_grid(intrinsics: Intrinsics) -> np.ndarray:
    """Per-pixel camera-frame ray directions with unit z, shape (H, W, 3).

    Cached per intrinsics: the grid is reused for every frame of a stream.
    """
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    gx, gy = np.meshgrid(x, y)
    grid = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    grid.setflags(write=False)
    return grid
