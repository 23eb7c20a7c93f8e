"""Rigid transforms, pinhole projection and Euler-angle utilities.

Camera frames follow the usual computer-vision convention: +x right, +y down,
+z along the optical axis. Pixel ``(i, j)`` (column, row) has its center at the
continuous coordinate ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS_DEPTH = 1e-6
GIMBAL_TOL = 1e-6


class DegenerateDepth(ValueError):
    """A point lies at or behind the camera plane."""


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.all(np.abs(r.T @ r - np.eye(3)) <= tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Square pixels, horizontal field of view ``fov_deg``, centered principal point."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)


def project(point, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point to pixel coordinates."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if not z > EPS_DEPTH:
        raise DegenerateDepth(f"depth {z} is not in front of the camera")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def unproject(pixel, depth: float, k: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project` for a known Z-depth."""
    if not depth > 0:
        raise DegenerateDepth(f"depth {depth} must be positive")
    u, v = np.asarray(pixel, dtype=np.float64)
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, float(depth)])


def project_points(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns ``(pixels, valid)`` where ``valid`` marks points with ``Z > EPS_DEPTH``;
    pixels of invalid points are NaN.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    valid = z > EPS_DEPTH
    safe = np.where(valid, z, 1.0)
    uv = np.stack([k.fx * p[:, 0] / safe + k.cx, k.fy * p[:, 1] / safe + k.cy], axis=-1)
    uv[~valid] = np.nan
    return uv, valid


def unproject_depth_map(depth: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift every pixel with positive depth to a camera-frame point.

    Returns ``(points, pixel_index)``; ``pixel_index`` holds ``(row, col)`` pairs.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols]
    u = cols + 0.5
    v = rows + 0.5
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)
    return pts, np.stack([rows, cols], axis=-1)


@dataclass(frozen=True)
class EulerAngles:
    """Intrinsic Z-Y-X angles in radians: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""

    yaw: float
    pitch: float
    roll: float
    gimbal_lock: bool = False

    def degrees(self) -> tuple[float, float, float]:
        return (math.degrees(self.yaw), math.degrees(self.pitch), math.degrees(self.roll))


def _wrap(angle: float) -> float:
    """Map to (-pi, pi]."""
    a = math.remainder(angle, 2.0 * math.pi)
    return math.pi if a == -math.pi else a


def euler_from_rotation(r: np.ndarray) -> EulerAngles:
    r = np.asarray(r, dtype=np.float64)
    s = max(-1.0, min(1.0, -r[2, 0]))
    pitch = math.asin(s)
    if abs(abs(pitch) - math.pi / 2.0) <= GIMBAL_TOL:
        # roll folds into yaw; canonicalize roll to zero
        pitch = math.copysign(math.pi / 2.0, pitch)
        yaw = math.atan2(-r[0, 1], r[1, 1])
        return EulerAngles(_wrap(yaw), pitch, 0.0, gimbal_lock=True)
    yaw = math.atan2(r[1, 0], r[0, 0])
    roll = math.atan2(r[2, 1], r[2, 2])
    return EulerAngles(_wrap(yaw), pitch, _wrap(roll))


def rotation_from_euler(e: EulerAngles) -> np.ndarray:
    return rot_z(e.yaw) @ rot_y(e.pitch) @ rot_x(e.roll)


def angle_difference(a: float, b: float) -> float:
    """Absolute shortest-arc difference of two angles, radians."""
    return abs(math.remainder(a - b, 2.0 * math.pi))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose of a camera at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        # looking straight along `up`: pick any perpendicular
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), eye)


@dataclass(frozen=True)
class Box3D:
    center: np.ndarray
    half_extents: np.ndarray
    orientation: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        h = np.array(self.half_extents, dtype=np.float64).reshape(3)
        r = np.eye(3) if self.orientation is None else np.array(self.orientation, dtype=np.float64).reshape(3, 3)
        if np.any(h <= 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "orientation", r)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.center + (signs * self.half_extents) @ self.orientation.T

    def axis_aligned(self) -> "Box3D":
        """Tightest axis-aligned box around this (possibly oriented) box."""
        c = self.corners()
        lo, hi = c.min(axis=0), c.max(axis=0)
        return Box3D((lo + hi) / 2, (hi - lo) / 2)

    def transformed(self, t: RigidTransform) -> "Box3D":
        return Box3D(t.apply(self.center), self.half_extents, t.rotation @ self.orientation)

    def contains(self, points: np.ndarray, pad: float = 0.0) -> np.ndarray:
        local = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) @ self.orientation
        return np.all(np.abs(local) <= self.half_extents + pad, axis=-1)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.half_extents, self.orientation.reshape(-1)])
