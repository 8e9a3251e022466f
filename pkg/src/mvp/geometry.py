"""Rigid transforms and the pinhole camera model.

Transforms are 4x4 row-major homogeneous matrices mapping column vectors
from a source frame to a target frame. All arithmetic is 64-bit. Pixel
conventions: integer pixel (i, j) has its center at continuous coordinate
(i + 0.5, j + 0.5); image bounds are the half-open box [0, width) x
[0, height).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import CalibrationError

ORTHONORMALITY_TOL = 1e-9

# Points with camera-frame z at or below this are rejected before the
# perspective division.
DEPTH_EPSILON = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion (rotation + translation) between two frames.

    The matrix is validated on construction: the rotation block must be
    orthonormal with determinant +1 within ORTHONORMALITY_TOL and the bottom
    row must be exactly (0, 0, 0, 1). Instances are immutable; the backing
    array is write-protected.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise CalibrationError(f"transform must be 4x4, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise CalibrationError("transform contains non-finite entries")
        r = m[:3, :3]
        ortho_err = float(np.abs(r.T @ r - np.eye(3)).max())
        if ortho_err > ORTHONORMALITY_TOL:
            raise CalibrationError(
                f"rotation block is not orthonormal (max deviation {ortho_err:.3e})")
        det = float(np.linalg.det(r))
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise CalibrationError(f"rotation block has determinant {det!r}, expected +1")
        if not (m[3, 0] == 0.0 and m[3, 1] == 0.0 and m[3, 2] == 0.0 and m[3, 3] == 1.0):
            raise CalibrationError("bottom row must be exactly (0, 0, 0, 1)")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rotation_translation(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = np.asarray(rotation, dtype=np.float64)
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return cls(m)

    @classmethod
    def from_translation(cls, translation) -> "RigidTransform":
        return cls.from_rotation_translation(np.eye(3), translation)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise CalibrationError("image size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CalibrationError("principal point must lie inside the image")


class PixelDepth(NamedTuple):
    """A projected point: continuous pixel coordinates plus camera-frame depth."""

    u: float
    v: float
    d: float

    @property
    def p(self) -> tuple:
        return (self.u, self.v)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform mapping x to a(b(x)). Never re-orthonormalizes silently."""
    return RigidTransform(a.matrix @ b.matrix)


def invert(t: RigidTransform) -> RigidTransform:
    """Closed-form rigid inverse (R^T, -R^T t); no generic matrix inversion."""
    r_t = t.rotation.T
    m = np.eye(4)
    m[:3, :3] = r_t
    m[:3, 3] = -r_t @ t.translation
    return RigidTransform(m)


def transform_point(t: RigidTransform, point) -> np.ndarray:
    """Apply a rigid transform to one 3D point (homogeneous multiply, drop w)."""
    p = np.asarray(point, dtype=np.float64)
    return t.rotation @ p + t.translation


def transform_points(t: RigidTransform, points) -> np.ndarray:
    """Apply a rigid transform to an (N, 3) array of points."""
    p = np.asarray(points, dtype=np.float64)
    return p @ t.rotation.T + t.translation


def project(point, k: CameraIntrinsics) -> Optional[PixelDepth]:
    """Perspective-project one camera-frame point.

    Returns None (rejection, a normal outcome) when the point sits at or
    behind the near plane (z <= DEPTH_EPSILON) or falls outside the image.
    """
    x, y, z = (float(point[0]), float(point[1]), float(point[2]))
    if not z > DEPTH_EPSILON:
        return None
    u = k.fx * x / z + k.cx
    v = k.fy * y / z + k.cy
    if not (0.0 <= u < k.width and 0.0 <= v < k.height):
        return None
    return PixelDepth(u, v, z)


def project_batch(points, k: CameraIntrinsics):
    """Vectorized projection of (N, 3) camera-frame points.

    Returns (uv, depth, accepted): an (N, 2) pixel array, an (N,) depth
    array, and an (N,) boolean mask. uv and depth are only meaningful where
    accepted is True.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    in_front = z > DEPTH_EPSILON
    safe_z = np.where(in_front, z, 1.0)
    u = k.fx * p[:, 0] / safe_z + k.cx
    v = k.fy * p[:, 1] / safe_z + k.cy
    accepted = in_front & (u >= 0.0) & (u < k.width) & (v >= 0.0) & (v < k.height)
    return np.stack([u, v], axis=1), z, accepted


def unproject(p, d: float, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixel p with depth d back to the camera frame.

    Exact inverse of project for in-bounds points; the returned z component
    is d itself, bit for bit.
    """
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d!r}")
    u, v = float(p[0]), float(p[1])
    return np.array([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d])


def unproject_batch(uv, depth, k: CameraIntrinsics) -> np.ndarray:
    """Vectorized unprojection of (N, 2) pixels with (N,) depths."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if d.size and not np.all(d > 0):
        raise ValueError("all depths must be positive")
    out = np.empty((uv.shape[0], 3))
    out[:, 0] = d * (uv[:, 0] - k.cx) / k.fx
    out[:, 1] = d * (uv[:, 1] - k.cy) / k.fy
    out[:, 2] = d
    return out
