"""Rigid-body transforms, pinhole projection, and rotation-angle handling.

Frame conventions, fixed here and assumed by every other module:

* World frame: right-handed, z up. "Down" is (0, 0, -1).
* Camera frame: right-handed, x right in the image, y down, z along the
  optical axis; points in front of the camera have z > 0.
* A Pose is camera-from-world: x_cam = rotation @ X_world + translation.
* Angles are degrees, wrapped to (-180, 180].

The (roll, yaw, pitch) triple decomposes a rotation as
R = Rz(yaw) @ Ry(roll) @ Rx(pitch), extracted with

    roll  = -asin(R[2, 0])
    yaw   = atan2(R[1, 0], R[0, 0])
    pitch = atan2(R[2, 1], R[2, 2])

undefined (gimbal lock) when |R[2, 0]| = 1. The labels match what UAV
flight-controller metadata reports; angles are only ever compared against
angles extracted the same way, so no axis relabeling happens anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AeroLocError

_ORTHO_TOL = 1e-9


class GimbalLock(AeroLocError):
    """Euler extraction undefined: |R31| = 1 within tolerance."""


class BehindCamera(AeroLocError):
    """Point has non-positive depth in the camera frame."""


class InvalidDepth(AeroLocError):
    """Depth must be positive and finite."""


def wrap_angle_deg(a):
    """Wrap an angle (or array of angles) in degrees to (-180, 180]."""
    return 180.0 - (180.0 - np.asarray(a, dtype=np.float64)) % 360.0


def angle_diff_deg(a, b):
    """Signed wrapped difference a - b in (-180, 180] degrees."""
    return wrap_angle_deg(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))


def _check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("rotation has non-finite entries")
    if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
        raise ValueError("rotation is not orthonormal within 1e-9")
    if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
        raise ValueError("rotation determinant differs from 1 by more than 1e-9")
    return R


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Pose:
    """Camera-from-world rigid transform: x_cam = rotation @ X + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation has non-finite entries")
        object.__setattr__(self, "rotation", _freeze(R))
        object.__setattr__(self, "translation", _freeze(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_center(rotation: np.ndarray, center) -> "Pose":
        """Build from a camera-to-world center C: t = -R @ C."""
        R = np.asarray(rotation, dtype=np.float64)
        C = np.asarray(center, dtype=np.float64).reshape(3)
        return Pose(R, -R @ C)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, C = -R^T t."""
        return -self.rotation.T @ self.translation

    def transform(self, points) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        X = np.asarray(points, dtype=np.float64)
        return X @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return self ∘ other (apply `other` first, then `self`)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def contains(self, pixels) -> np.ndarray:
        """True where pixels (..., 2) fall inside [0, w-1] x [0, h-1]."""
        p = np.asarray(pixels, dtype=np.float64)
        return ((p[..., 0] >= 0.0) & (p[..., 0] <= self.width - 1.0)
                & (p[..., 1] >= 0.0) & (p[..., 1] <= self.height - 1.0))


@dataclass(frozen=True)
class RotationAngles:
    """(roll, yaw, pitch) in degrees, wrapped to (-180, 180] on construction."""

    roll: float
    yaw: float
    pitch: float

    def __post_init__(self):
        for name in ("roll", "yaw", "pitch"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, float(wrap_angle_deg(v)))

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.yaw, self.pitch])


@dataclass(frozen=True)
class SensorPrior:
    """Camera-from-world rotation reported by the vehicle's inertial sensors."""

    rotation: np.ndarray
    angles: RotationAngles | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(_check_rotation(self.rotation)))

    def extracted_angles(self) -> RotationAngles:
        """Euler angles of the prior rotation. Raises GimbalLock when degenerate."""
        if self.angles is not None:
            return self.angles
        return euler_from_rotation(self.rotation)

    def gravity(self) -> np.ndarray:
        return gravity_direction(self.rotation)


def rot_x(deg: float) -> np.ndarray:
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_from_rotation(R) -> RotationAngles:
    """Extract (roll, yaw, pitch) degrees from an orthonormal rotation.

    Uses two-argument arctangent throughout so quadrants survive; raises
    GimbalLock when |R31| >= 1 - 1e-9, where the decomposition is undefined.
    """
    R = _check_rotation(R)
    if abs(R[2, 0]) >= 1.0 - 1e-9:
        raise GimbalLock(f"|R31| = {abs(R[2, 0]):.12f}, angle extraction undefined")
    roll = math.degrees(-math.asin(R[2, 0]))
    yaw = math.degrees(math.atan2(R[1, 0], R[0, 0]))
    pitch = math.degrees(math.atan2(R[2, 1], R[2, 2]))
    return RotationAngles(roll=roll, yaw=yaw, pitch=pitch)


def rotation_from_angles(angles: RotationAngles) -> np.ndarray:
    """Compose Rz(yaw) @ Ry(roll) @ Rx(pitch); inverse of euler_from_rotation."""
    return rot_z(angles.yaw) @ rot_y(angles.roll) @ rot_x(angles.pitch)


def quat_from_rotation(R) -> np.ndarray:
    """Rotation matrix -> Hamilton quaternion (w, x, y, z), w >= 0."""
    R = _check_rotation(R)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                          (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = math.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                          0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = math.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                          (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q) -> np.ndarray:
    """Hamilton quaternion (w, x, y, z) -> rotation matrix. Normalizes q."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def gravity_direction(R) -> np.ndarray:
    """World down (0, 0, -1) expressed in the camera frame: R @ (0, 0, -1)."""
    R = _check_rotation(R)
    g = -R[:, 2]
    return g / np.linalg.norm(g)


def project(pose: Pose, K: Intrinsics, point) -> tuple[np.ndarray, float]:
    """Project one world point; returns (pixel, optical-axis depth).

    Raises BehindCamera when the camera-frame z is <= 1e-9.
    """
    x = pose.transform(np.asarray(point, dtype=np.float64).reshape(3))
    z = x[2]
    if z <= 1e-9:
        raise BehindCamera(f"camera-frame depth {z:.3g} <= 1e-9")
    pixel = np.array([K.fx * x[0] / z + K.cx, K.fy * x[1] / z + K.cy])
    return pixel, float(z)


def project_points(pose: Pose, K: Intrinsics, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (n, 3) world points.

    Returns (pixels (n, 2), depths (n,), in_front (n,) bool). Pixels of
    behind-camera points are left at NaN rather than raising.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    xc = pose.transform(X)
    z = xc[:, 2]
    in_front = z > 1e-9
    px = np.full((X.shape[0], 2), np.nan)
    zs = np.where(in_front, z, 1.0)
    px[:, 0] = np.where(in_front, K.fx * xc[:, 0] / zs + K.cx, np.nan)
    px[:, 1] = np.where(in_front, K.fy * xc[:, 1] / zs + K.cy, np.nan)
    return px, z, in_front


def unproject(pose: Pose, K: Intrinsics, pixel, depth: float) -> np.ndarray:
    """Back-project a pixel at an optical-axis depth into world coordinates."""
    if not (np.isfinite(depth) and depth > 0):
        raise InvalidDepth(f"depth must be positive and finite, got {depth}")
    p = np.asarray(pixel, dtype=np.float64).reshape(2)
    x_cam = np.array([(p[0] - K.cx) / K.fx * depth,
                      (p[1] - K.cy) / K.fy * depth,
                      depth])
    return pose.rotation.T @ (x_cam - pose.translation)


def unproject_points(pose: Pose, K: Intrinsics, pixels, depths) -> np.ndarray:
    """Vectorized back-projection of (n, 2) pixels with (n,) positive depths."""
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    x_cam = np.stack([(p[:, 0] - K.cx) / K.fx * d,
                      (p[:, 1] - K.cy) / K.fy * d,
                      d], axis=1)
    return (x_cam - pose.translation) @ pose.rotation
