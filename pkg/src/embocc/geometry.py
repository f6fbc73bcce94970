"""Quaternions, rigid poses and pinhole cameras.

Conventions used everywhere in the package:

* quaternions are ``(w, x, y, z)`` arrays, Hamilton product;
* a :class:`Pose` is camera-to-world, so its translation is the camera center;
* the camera frame has +z forward, +x right and +y down, matching pixel
  growth in ``(u, v)``; pixel centers sit on integer coordinates.

All functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_NEAR = 1e-4
Z_FAR = 4.8

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class DegenerateQuaternionError(ValueError):
    pass


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(~np.isfinite(q)) or np.any(norm == 0.0):
        raise DegenerateQuaternionError("degenerate quaternion")
    return q / norm


def quaternion_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quaternion_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw Hamilton product ``a * b`` without renormalization."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def compose_quaternions(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation ``a`` applied after ``b``, renormalized to unit length.

    Raises :class:`DegenerateQuaternionError` for zero-norm or non-finite input.
    """
    normalize_quaternion(a)
    normalize_quaternion(b)
    return normalize_quaternion(quaternion_product(a, b))


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (batched over leading dims)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quaternion_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a single proper rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = normalize_quaternion(np.array(q))
    return q if q[0] >= 0 else -q


def quaternion_power(q: np.ndarray, t) -> np.ndarray:
    """Slerp from identity to ``q``: the rotation of ``q`` scaled by ``t``.

    Takes the short arc, so ``q`` and ``-q`` give the same result.
    """
    q = normalize_quaternion(q)
    q = np.where(q[..., :1] < 0, -q, q)
    t = np.asarray(t, dtype=np.float64)
    w = np.clip(q[..., 0], -1.0, 1.0)
    half = np.arccos(w)
    sin_half = np.sin(half)
    small = sin_half < 1e-12
    axis = q[..., 1:] / np.where(small, 1.0, sin_half)[..., None]
    new_half = t * half
    out = np.concatenate([np.cos(new_half)[..., None], np.sin(new_half)[..., None] * axis], axis=-1)
    ident = np.broadcast_to(IDENTITY_QUAT, out.shape)
    return np.where(small[..., None], ident, out)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("pose rotation is not a proper rotation matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look(cls, position, yaw: float, pitch: float = 0.0) -> "Pose":
        """Level-horizon camera at ``position`` with heading ``yaw`` (radians,
        from world +x toward +y) tilted down by ``pitch``; world +z is up."""
        cp, sp = np.cos(pitch), np.sin(pitch)
        forward = np.array([np.cos(yaw) * cp, np.sin(yaw) * cp, -sp])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), position)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def quaternion(self) -> np.ndarray:
        return quaternion_from_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        """Row-major 3x4 ``[R | t]``."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def transformed(self, rotation, translation) -> "Pose":
        """Pose after applying the world-frame rigid motion ``x -> R x + t``."""
        rotation = np.asarray(rotation, dtype=np.float64)
        return Pose(rotation @ self.rotation, rotation @ self.translation + translation)


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, k, width: int, height: int) -> "Intrinsics":
        k = np.asarray(k, dtype=np.float64)
        return cls(float(k[0, 0]), float(k[1, 1]), float(k[0, 2]), float(k[1, 2]), int(width), int(height))


def world_to_camera(p_world, pose: Pose) -> np.ndarray:
    """``R^T (p - t)`` for points of shape ``(..., 3)``."""
    p = np.asarray(p_world, dtype=np.float64)
    return (p - pose.translation) @ pose.rotation


def camera_to_world(p_cam, pose: Pose) -> np.ndarray:
    p = np.asarray(p_cam, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def project_to_pixel(p_cam, K: Intrinsics):
    """Pinhole projection.

    Returns ``(u, v, z, behind)`` where ``behind`` flags ``z <= 0``; for those
    points ``u`` and ``v`` are NaN instead of raising.
    """
    p = np.asarray(p_cam, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    behind = z <= 0.0
    safe_z = np.where(behind, 1.0, z)
    u = np.where(behind, np.nan, K.fx * x / safe_z + K.cx)
    v = np.where(behind, np.nan, K.fy * y / safe_z + K.cy)
    return u, v, z, behind


def in_frustum(p_world, pose: Pose, K: Intrinsics, z_near: float = Z_NEAR, z_far: float = Z_FAR):
    """True where ``z_near < z <= z_far`` and the projection lands in
    ``[0, width) x [0, height)``."""
    if not z_near < z_far:
        raise ValueError("z_near must be smaller than z_far")
    u, v, z, behind = project_to_pixel(world_to_camera(p_world, pose), K)
    with np.errstate(invalid="ignore"):
        inside = (z > z_near) & (z <= z_far) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return inside & ~behind
