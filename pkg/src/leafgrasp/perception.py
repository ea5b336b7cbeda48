"""Leaf pose estimation from masked depth.

The pipeline per instance mask is: mask the depth map, back-project the
valid pixels, drop per-axis z-score outliers, take the cloud member closest
to the component-wise median as the leaf center, fit the normal by PCA,
build a tangent frame from the uppermost point and emit five candidate
grasp orientations rotated about the normal.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateCloud, DegenerateTangent, DimensionMismatch, EmptyCloud
from .geometry import CameraIntrinsics, Pose, as_vec3, quat_from_basis, rotate_about_axis

logger = logging.getLogger(__name__)

Z_THRESHOLD = 2.33
# pose 1 is the PCA frame itself; poses 2-5 rotate it about the normal
POSE_ANGLES = (0.0, -math.pi / 4, -math.pi / 2, -3 * math.pi / 4, math.pi)
_NORMAL_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class Observation:
    """One RGB-D frame. ``depth`` is (H, W) in meters with 0 for missing."""

    image: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics


@dataclass(frozen=True, eq=False)
class LeafCloud:
    leaf_id: int
    points: np.ndarray
    pixels: np.ndarray | None = None  # (N, 2) integer (u, v) of each point
    filtered: bool = False

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class LeafFrame:
    center: np.ndarray
    tangent: np.ndarray
    bitangent: np.ndarray
    normal: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.column_stack([self.tangent, self.bitangent, self.normal])


@dataclass(frozen=True, eq=False)
class PoseSet:
    leaf_id: int
    poses: tuple[Pose, ...]
    camera_distance: float

    @property
    def center(self) -> np.ndarray:
        return self.poses[0].position

    def to_json(self) -> dict:
        return {"leaf_id": self.leaf_id, "camera_distance": self.camera_distance,
                "poses": [p.to_json() for p in self.poses]}

    @classmethod
    def from_json(cls, d: dict) -> "PoseSet":
        return cls(int(d["leaf_id"]), tuple(Pose.from_json(p) for p in d["poses"]),
                   float(d["camera_distance"]))


@dataclass
class PerceptionReport:
    posesets: list[PoseSet] = field(default_factory=list)
    clouds: dict[int, LeafCloud] = field(default_factory=dict)
    frames: dict[int, LeafFrame] = field(default_factory=dict)
    dropped: list[tuple[int, str]] = field(default_factory=list)


def mask_depth(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape:
        raise DimensionMismatch(f"depth {depth.shape} vs mask {mask.shape}")
    return np.where(mask, depth, 0).astype(depth.dtype, copy=False)


def backproject(masked: np.ndarray, K: CameraIntrinsics, leaf_id: int = 0) -> LeafCloud:
    """Pinhole back-projection of every pixel with positive depth, row-major order."""
    masked = np.asarray(masked)
    if masked.shape != (K.height, K.width):
        raise DimensionMismatch(f"depth {masked.shape} vs intrinsics {(K.height, K.width)}")
    v, u = np.nonzero(masked > 0)
    if len(u) == 0:
        raise EmptyCloud(f"leaf {leaf_id}: no valid depth under mask")
    d = masked[v, u].astype(float)
    pts = np.column_stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d])
    return LeafCloud(leaf_id, pts, np.column_stack([u, v]))


def zscores(points: np.ndarray) -> np.ndarray:
    """Per-axis z-scores with population std; flat axes score 0."""
    mu = points.mean(axis=0)
    sigma = points.std(axis=0)
    flat = sigma <= 1e-12 * np.maximum(1.0, np.abs(mu))
    safe = np.where(flat, 1.0, sigma)
    return np.where(flat, 0.0, (points - mu) / safe)


def filter_outliers(cloud: LeafCloud, z_th: float = Z_THRESHOLD) -> LeafCloud:
    """Keep points with ``|Z| <= z_th`` on every axis (single pass)."""
    if len(cloud) < 4:
        return replace(cloud, filtered=True)
    keep = np.all(np.abs(zscores(cloud.points)) <= z_th, axis=1)
    pixels = cloud.pixels[keep] if cloud.pixels is not None else None
    return LeafCloud(cloud.leaf_id, cloud.points[keep], pixels, filtered=True)


def central_point_index(points: np.ndarray) -> int:
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        raise EmptyCloud("cannot locate the center of an empty cloud")
    d = points - np.median(points, axis=0)
    return int(np.argmin((d * d).sum(axis=1)))


def central_point(cloud: LeafCloud | np.ndarray) -> np.ndarray:
    """Cloud member closest to the component-wise median."""
    pts = cloud.points if isinstance(cloud, LeafCloud) else np.asarray(cloud, dtype=float)
    return pts[central_point_index(pts)].copy()


def estimate_normal(cloud: LeafCloud | np.ndarray, viewpoint=(0.0, 0.0, 0.0), center=None) -> np.ndarray:
    """Smallest-variance principal axis, oriented toward ``viewpoint``.

    The sign test uses ``center`` when given, else the centroid.
    """
    pts = cloud.points if isinstance(cloud, LeafCloud) else np.asarray(cloud, dtype=float)
    if len(pts) < 3:
        raise DegenerateCloud(f"{len(pts)} points cannot define a plane")
    mean = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - mean, full_matrices=False)
    if s[0] == 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateCloud("points are collinear or coincident")
    viewpoint = as_vec3(viewpoint)
    ref = mean if center is None else as_vec3(center)
    view_dir = viewpoint - ref
    n = vt[2]
    lam = s * s / len(pts)
    if abs(lam[1] - lam[2]) <= 1e-12 and abs(vt[1] @ view_dir) > abs(vt[2] @ view_dir):
        n = vt[1]
    n = n / np.linalg.norm(n)
    if n @ view_dir < 0:
        n = -n
    return n


def leaf_frame(cloud: LeafCloud | np.ndarray, center, n) -> LeafFrame:
    """Tangent frame: t points from the center toward the uppermost point (min camera y)."""
    pts = cloud.points if isinstance(cloud, LeafCloud) else np.asarray(cloud, dtype=float)
    center = as_vec3(center)
    n = as_vec3(n)
    top = pts[int(np.argmin(pts[:, 1]))]
    v_star = top - center
    v = v_star - (v_star @ n) * n
    norm = np.linalg.norm(v)
    if norm < 1e-9:
        raise DegenerateTangent("reference point projects onto the center")
    t = v / norm
    b = np.cross(n, t)
    return LeafFrame(center, t, b, n)


def candidate_poses(frame: LeafFrame, leaf_id: int = 0) -> PoseSet:
    q1 = quat_from_basis(frame.tangent, frame.bitangent, frame.normal)
    poses = tuple(
        Pose(frame.center, q1 if a == 0.0 else rotate_about_axis(q1, _NORMAL_AXIS, a))
        for a in POSE_ANGLES
    )
    return PoseSet(leaf_id, poses, float(np.linalg.norm(frame.center)))


def perceive_leaf(depth: np.ndarray, mask: np.ndarray, K: CameraIntrinsics, leaf_id: int,
                  z_th: float = Z_THRESHOLD) -> tuple[PoseSet, LeafCloud, LeafFrame]:
    cloud = backproject(mask_depth(depth, mask), K, leaf_id)
    cloud = filter_outliers(cloud, z_th)
    center = central_point(cloud)
    n = estimate_normal(cloud, np.zeros(3), center=center)
    frame = leaf_frame(cloud, center, n)
    return candidate_poses(frame, leaf_id), cloud, frame


def perceive_report(obs: Observation, masks, K: CameraIntrinsics | None = None,
                    z_th: float = Z_THRESHOLD) -> PerceptionReport:
    K = K or obs.intrinsics
    report = PerceptionReport()
    for leaf_id, mask in enumerate(masks):
        try:
            ps, cloud, frame = perceive_leaf(obs.depth, mask, K, leaf_id, z_th)
        except (EmptyCloud, DegenerateCloud, DegenerateTangent) as exc:
            logger.info("dropping leaf %d: %s", leaf_id, exc)
            report.dropped.append((leaf_id, f"{type(exc).__name__}: {exc}"))
            continue
        report.posesets.append(ps)
        report.clouds[leaf_id] = cloud
        report.frames[leaf_id] = frame
    report.posesets.sort(key=lambda p: (p.camera_distance, p.leaf_id))
    return report


def perceive(obs: Observation, masks, K: CameraIntrinsics | None = None) -> list[PoseSet]:
    """Pose sets for every usable mask, nearest leaf first."""
    return perceive_report(obs, masks, K).posesets

