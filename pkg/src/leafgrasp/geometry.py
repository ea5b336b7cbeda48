"""Rigid transforms, unit quaternions and the pinhole camera model.

Quaternions are stored as ``[w, x, y, z]`` numpy arrays in canonical form
(``w >= 0``). Camera frames follow the optical convention: +x right, +y down,
+z forward, so "up" in the image is camera -y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonOrthonormalBasis, ZeroAxis

_SIGN_TOL = 1e-12


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite vector {a}")
    return a


def canonical_quat(q) -> np.ndarray:
    """Normalize ``q`` and pick the sign with ``w >= 0``.

    When ``w`` is (numerically) zero the first significant vector component
    is made positive so that half-turns still have a unique representation.
    """
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ZeroAxis("zero quaternion")
    q = q / n
    if abs(q[0]) > _SIGN_TOL:
        return q if q[0] > 0 else -q
    q = q.copy()
    q[0] = 0.0
    for c in q[1:]:
        if abs(c) > _SIGN_TOL:
            return q if c > 0 else -q
    return q


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ZeroAxis("rotation axis has zero length")
    axis = axis / n
    h = 0.5 * angle
    return canonical_quat(np.concatenate([[math.cos(h)], math.sin(h) * axis]))


def rot_x(angle: float) -> np.ndarray:
    return quat_from_axis_angle((1.0, 0.0, 0.0), angle)


def rot_y(angle: float) -> np.ndarray:
    return quat_from_axis_angle((0.0, 1.0, 0.0), angle)


def rot_z(angle: float) -> np.ndarray:
    return quat_from_axis_angle((0.0, 0.0, 1.0), angle)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to canonical quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(q)


def quat_log(q) -> np.ndarray:
    """Rotation vector (axis * angle) of ``q``, angle in [0, pi]."""
    q = canonical_quat(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return 2.0 * v
    angle = 2.0 * math.atan2(s, q[0])
    return v * (angle / s)


def quat_angle(a, b) -> float:
    """Geodesic distance between two orientations, in radians."""
    d = abs(float(np.dot(canonical_quat(a), canonical_quat(b))))
    return 2.0 * math.acos(min(1.0, d))


def quat_from_basis(t, b, n, tol: float = 1e-6) -> np.ndarray:
    """Quaternion whose rotation matrix has columns ``[t b n]``."""
    R = np.column_stack([as_vec3(t), as_vec3(b), as_vec3(n)])
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or np.linalg.det(R) < 0:
        raise NonOrthonormalBasis("(t, b, n) is not a right-handed orthonormal triad")
    return matrix_to_quat(R)


def rotate_about_axis(q, axis, angle: float) -> np.ndarray:
    """Apply an intrinsic rotation of ``angle`` about ``axis`` given in the frame of ``q``."""
    return canonical_quat(quat_mul(q, quat_from_axis_angle(axis, angle)))


@dataclass(frozen=True, eq=False)
class Transform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", canonical_quat(self.rotation))
        object.__setattr__(self, "translation", as_vec3(self.translation))

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "Transform":
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(self.rotation)
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "Transform":
        qi = quat_conj(self.rotation)
        return Transform(qi, -(quat_to_matrix(qi) @ self.translation))

    def __matmul__(self, other: "Transform") -> "Transform":
        return compose(self, other)

    def to_json(self) -> dict:
        return {"p": self.translation.tolist(), "q": self.rotation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Transform":
        return cls(np.asarray(d["q"], dtype=float), np.asarray(d["p"], dtype=float))


@dataclass(frozen=True, eq=False)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        object.__setattr__(self, "orientation", canonical_quat(self.orientation))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    @property
    def normal(self) -> np.ndarray:
        """Third column of the orientation (the leaf normal / gripper z axis)."""
        return self.rotation_matrix[:, 2]

    def as_transform(self) -> Transform:
        return Transform(self.orientation, self.position)

    @classmethod
    def from_transform(cls, T: Transform) -> "Pose":
        return cls(T.translation, T.rotation)

    def to_json(self) -> dict:
        return {"p": self.position.tolist(), "q": self.orientation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["p"], dtype=float), np.asarray(d["q"], dtype=float))


def compose(a: Transform, b: Transform) -> Transform:
    """``a`` after ``b``: maps points through ``b`` first."""
    R = quat_to_matrix(a.rotation)
    return Transform(quat_mul(a.rotation, b.rotation), R @ b.translation + a.translation)


def transform_point(T: Transform, p) -> np.ndarray:
    """Apply ``T`` to a point or an (N, 3) array of points."""
    p = np.asarray(p, dtype=float)
    return p @ quat_to_matrix(T.rotation).T + T.translation


def transform_pose(T: Transform, pose: Pose) -> Pose:
    return Pose.from_transform(compose(T, pose.as_transform()))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(position error in m, geodesic rotation error in rad)."""
    return float(np.linalg.norm(a.position - b.position)), quat_angle(a.orientation, b.orientation)


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
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def project(self, points) -> np.ndarray:
        """Pixel coordinates ``(u, v)`` of camera-frame points, shape (N, 2)."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        return np.column_stack([
            self.fx * P[:, 0] / P[:, 2] + self.cx,
            self.fy * P[:, 1] / P[:, 2] + self.cy,
        ])

    def rays(self) -> np.ndarray:
        """Per-pixel ray directions with unit z, shape (height, width, 3)."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# RealSense-class color stream at 640x480
DEFAULT_INTRINSICS = CameraIntrinsics(fx=615.0, fy=615.0, cx=320.0, cy=240.0, width=640, height=480)
