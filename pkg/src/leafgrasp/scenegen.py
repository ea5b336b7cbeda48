"""Synthetic foliage batches and a ray-cast RGB-D renderer with ground truth.

Leaves are elliptical patches bent cylindrically about their tangent
(length) axis. The renderer intersects one ray per pixel with every leaf,
keeps the nearest hit, and derives instance masks from the z-buffer, so
masks partition the image exactly. Sensor noise is additive Gaussian depth
jitter plus random dropout in a band along each mask boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyRender, InvalidParams
from .geometry import (
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    Pose,
    Transform,
    as_vec3,
    compose,
    matrix_to_quat,
    quat_from_axis_angle,
    quat_to_matrix,
    transform_point,
)
from .perception import Observation

# camera -> robot base: optical axis along base +x, image "up" along base +z
DEFAULT_CAMERA_MOUNT = Transform(
    matrix_to_quat(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])),
    np.array([0.0, 0.0, 0.45]),
)
DEFAULT_STANDOFF = 0.5
CAMERA_RANGE = (0.3, 3.0)

_CURVATURE_EPS = 1e-6


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0
    boundary_dropout_px: int = 0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.depth_sigma < 0 or self.boundary_dropout_px < 0:
            raise InvalidParams("noise magnitudes must be non-negative")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise InvalidParams("dropout_rate must lie in [0, 1]")


NOISE_PRESETS = {
    "none": NoiseModel(),
    "lab": NoiseModel(depth_sigma=0.001, boundary_dropout_px=1, dropout_rate=0.3),
    "field": NoiseModel(depth_sigma=0.003, boundary_dropout_px=3, dropout_rate=0.7),
}


@dataclass(frozen=True, eq=False)
class LeafSpec:
    gt_pose: Pose
    length: float
    width: float
    curvature: float = 0.0
    stem_dir: np.ndarray | None = None

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise InvalidParams("leaf dimensions must be positive")
        if abs(self.curvature) * max(self.length, self.width) >= math.pi:
            raise InvalidParams("curvature too strong for the leaf size")
        stem = self.gt_pose.rotation_matrix[:, 0] if self.stem_dir is None else self.stem_dir
        stem = as_vec3(stem)
        object.__setattr__(self, "stem_dir", stem / np.linalg.norm(stem))

    @property
    def radius(self) -> float:
        return 0.5 * max(self.length, self.width)

    def surface_local(self, s, w) -> np.ndarray:
        """Leaf-frame points for length coordinate ``s`` and arc-length ``w`` across the width."""
        s = np.asarray(s, dtype=float)
        w = np.asarray(w, dtype=float)
        k = self.curvature
        if abs(k) < _CURVATURE_EPS:
            return np.stack([s, w, np.zeros_like(w)], axis=-1)
        return np.stack([s, np.sin(k * w) / k, (1.0 - np.cos(k * w)) / k], axis=-1)

    def sample_surface(self, n: int, rng_seed: int = 0, frame: str = "world") -> np.ndarray:
        """``n`` points uniformly drawn over the ellipse parameter domain."""
        rng = np.random.default_rng(rng_seed)
        r = np.sqrt(rng.random(n))
        th = rng.random(n) * 2 * math.pi
        local = self.surface_local(0.5 * self.length * r * np.cos(th), 0.5 * self.width * r * np.sin(th))
        return local if frame == "local" else transform_point(self.gt_pose.as_transform(), local)

    def to_json(self) -> dict:
        return {"pose": self.gt_pose.to_json(), "length": self.length, "width": self.width,
                "curvature": self.curvature, "stem_dir": self.stem_dir.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "LeafSpec":
        return cls(Pose.from_json(d["pose"]), float(d["length"]), float(d["width"]),
                   float(d.get("curvature", 0.0)), np.asarray(d.get("stem_dir"), dtype=float)
                   if d.get("stem_dir") is not None else None)


@dataclass(frozen=True)
class LeafParams:
    """Sampling ranges for :func:`gen_leaf`; ``center``/``facing``/``up`` are world-frame."""

    center: tuple[float, float, float] = (0.5, 0.0, 0.45)
    facing: tuple[float, float, float] = (-1.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    length: tuple[float, float] = (0.06, 0.09)
    width_ratio: tuple[float, float] = (0.45, 0.6)
    curvature: tuple[float, float] = (-10.0, 10.0)
    max_tilt: float = math.radians(35.0)
    max_roll: float = math.radians(40.0)

    def validate(self):
        lo, hi = self.length
        if not 0 < lo <= hi:
            raise InvalidParams(f"bad length range {self.length}")
        lo, hi = self.width_ratio
        if not 0 < lo <= hi:
            raise InvalidParams(f"bad width ratio range {self.width_ratio}")
        if self.curvature[0] > self.curvature[1]:
            raise InvalidParams(f"bad curvature range {self.curvature}")
        if max(abs(c) for c in self.curvature) * self.length[1] * max(1.0, self.width_ratio[1]) >= math.pi:
            raise InvalidParams("curvature range allows self-intersecting leaves")
        if not 0 <= self.max_tilt < math.pi / 2:
            raise InvalidParams("max_tilt must be in [0, pi/2)")
        if np.linalg.norm(self.facing) == 0:
            raise InvalidParams("facing direction is zero")


def _uniform(rng, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo if lo == hi else rng.uniform(lo, hi))


def gen_leaf(rng_seed, params: LeafParams = LeafParams()) -> LeafSpec:
    """One leaf at ``params.center`` whose normal is tilted at most ``max_tilt`` from ``facing``."""
    params.validate()
    rng = np.random.default_rng(rng_seed)
    length = _uniform(rng, params.length)
    width = length * _uniform(rng, params.width_ratio)
    curvature = _uniform(rng, params.curvature)
    tilt = params.max_tilt * math.sqrt(rng.random())
    tilt_dir = rng.random() * 2 * math.pi
    roll = rng.uniform(-params.max_roll, params.max_roll)

    facing = as_vec3(params.facing)
    facing = facing / np.linalg.norm(facing)
    up = as_vec3(params.up)
    up = up - (up @ facing) * facing
    if np.linalg.norm(up) < 1e-9:
        raise InvalidParams("up is parallel to facing")
    up = up / np.linalg.norm(up)
    side = np.cross(up, facing)
    # tilt the normal away from facing, then spin the tangent about it
    tilt_axis = math.cos(tilt_dir) * up + math.sin(tilt_dir) * side
    R_tilt = quat_to_matrix(quat_from_axis_angle(tilt_axis, tilt))
    n = R_tilt @ facing
    t = R_tilt @ up
    t = quat_to_matrix(quat_from_axis_angle(n, roll)) @ t
    b = np.cross(n, t)
    pose = Pose(as_vec3(params.center), matrix_to_quat(np.column_stack([t, b, n])))
    return LeafSpec(pose, length, width, curvature, t)


@dataclass(frozen=True, eq=False)
class Scene:
    leaves: tuple[LeafSpec, ...]
    camera_pose: Transform = field(default_factory=lambda: DEFAULT_CAMERA_MOUNT.inverse())  # world -> camera
    standoff: float = DEFAULT_STANDOFF
    scene_id: str = "scene"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "leaves", tuple(self.leaves))
        lo, hi = CAMERA_RANGE
        if not lo <= self.standoff <= hi:
            raise InvalidParams(f"standoff {self.standoff} outside camera range {CAMERA_RANGE}")

    @property
    def extrinsic(self) -> Transform:
        """camera -> world (robot base)."""
        return self.camera_pose.inverse()

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "seed": self.seed, "standoff": self.standoff,
                "camera_pose": self.camera_pose.to_json(),
                "leaves": [leaf.to_json() for leaf in self.leaves]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(tuple(LeafSpec.from_json(x) for x in d["leaves"]),
                   Transform.from_json(d["camera_pose"]), float(d.get("standoff", DEFAULT_STANDOFF)),
                   str(d.get("scene_id", "scene")), int(d.get("seed", 0)))


def _cones_disjoint(c1, r1, c2, r2, margin: float) -> bool:
    d1, d2 = np.linalg.norm(c1), np.linalg.norm(c2)
    ang = math.acos(max(-1.0, min(1.0, float(c1 @ c2) / (d1 * d2))))
    return ang > math.asin(min(1.0, r1 / d1)) + math.asin(min(1.0, r2 / d2)) + margin


def gen_batch(rng_seed, n_leaves: int, occlusion_level: float = 0.0, standoff: float = DEFAULT_STANDOFF,
              params: LeafParams = LeafParams(), camera_pose: Transform | None = None,
              lateral: tuple[float, float] = (0.14, 0.10), depth_spread: float = 0.04,
              scene_id: str = "scene", max_attempts: int = 500) -> Scene:
    """A batch of leaves in front of the camera.

    With probability ``occlusion_level`` each leaf after the first is placed
    behind or in front of an earlier one so their silhouettes overlap;
    otherwise its view cone is kept disjoint from every earlier leaf.
    """
    if n_leaves < 1:
        raise InvalidParams("n_leaves must be >= 1")
    if not 0.0 <= occlusion_level <= 1.0:
        raise InvalidParams("occlusion_level must lie in [0, 1]")
    camera_pose = camera_pose or DEFAULT_CAMERA_MOUNT.inverse()
    cam_to_world = camera_pose.inverse()
    R_cw = quat_to_matrix(cam_to_world.rotation)
    rng = np.random.default_rng(rng_seed)
    # pixel-scale guard band so the disjoint-cone test survives rasterization
    margin = 3.0 / DEFAULT_INTRINSICS.fx

    leaves: list[LeafSpec] = []
    centers: list[np.ndarray] = []
    for i in range(n_leaves):
        leaf_seed = int(rng.integers(2**31))
        for _ in range(max_attempts):
            occlude = i > 0 and rng.random() < occlusion_level
            if occlude:
                j = int(rng.integers(i))
                ang = rng.random() * 2 * math.pi
                reach = rng.uniform(0.3, 0.8) * 2 * leaves[j].radius
                dz = rng.choice([-1.0, 1.0]) * rng.uniform(0.04, 0.07)
                c = centers[j] + np.array([reach * math.cos(ang), reach * math.sin(ang), dz])
            else:
                c = np.array([rng.uniform(-lateral[0], lateral[0]), rng.uniform(-lateral[1], lateral[1]),
                              standoff + rng.uniform(-depth_spread, depth_spread)])
            facing = -c / np.linalg.norm(c)
            leaf_params = LeafParams(
                center=tuple(transform_point(cam_to_world, c)), facing=tuple(R_cw @ facing),
                up=tuple(R_cw @ np.array([0.0, -1.0, 0.0])), length=params.length,
                width_ratio=params.width_ratio, curvature=params.curvature,
                max_tilt=params.max_tilt, max_roll=params.max_roll)
            leaf = gen_leaf(leaf_seed, leaf_params)
            if occlude or all(_cones_disjoint(c, leaf.radius, cj, lj.radius, margin)
                              for cj, lj in zip(centers, leaves)):
                break
        else:
            raise InvalidParams(f"could not place leaf {i} after {max_attempts} attempts")
        leaves.append(leaf)
        centers.append(c)
    return Scene(tuple(leaves), camera_pose, standoff, scene_id, int(rng_seed))


@dataclass(frozen=True, eq=False)
class GtRecord:
    leaf_id: int
    pose_world: Pose
    center_cam: np.ndarray
    normal_cam: np.ndarray
    visible_pixels: int

    def to_json(self) -> dict:
        return {"leaf_id": self.leaf_id, "pose": self.pose_world.to_json(),
                "center_cam": self.center_cam.tolist(), "normal_cam": self.normal_cam.tolist(),
                "visible_pixels": self.visible_pixels}

    @classmethod
    def from_json(cls, d: dict) -> "GtRecord":
        return cls(int(d["leaf_id"]), Pose.from_json(d["pose"]), np.asarray(d["center_cam"], dtype=float),
                   np.asarray(d["normal_cam"], dtype=float), int(d["visible_pixels"]))


def _pixel_window(leaf: LeafSpec, T_cam_leaf: Transform, K: CameraIntrinsics):
    """Conservative (v0, v1, u0, u1) pixel box of the leaf, or the full image."""
    hl, hw = 0.5 * leaf.length, 0.5 * leaf.width
    zb = abs(leaf.curvature) * hw * hw + 1e-3
    corners = np.array([[sx * hl, sy * hw, sz * zb] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    pts = transform_point(T_cam_leaf, corners)
    if np.any(pts[:, 2] <= 1e-3):
        return 0, K.height, 0, K.width
    uv = K.project(pts)
    u0 = max(0, int(math.floor(uv[:, 0].min())) - 2)
    u1 = min(K.width, int(math.ceil(uv[:, 0].max())) + 3)
    v0 = max(0, int(math.floor(uv[:, 1].min())) - 2)
    v1 = min(K.height, int(math.ceil(uv[:, 1].max())) + 3)
    return v0, v1, u0, u1


def _intersect_leaf(leaf: LeafSpec, T_cam_leaf: Transform, rays: np.ndarray) -> np.ndarray:
    """Ray parameter (= depth, since rays have unit z) of the first hit, inf for misses."""
    R = quat_to_matrix(T_cam_leaf.rotation)
    o = -(R.T @ T_cam_leaf.translation)
    d = rays @ R
    hl, hw = 0.5 * leaf.length, 0.5 * leaf.width
    k = leaf.curvature
    out = np.full(d.shape[0], np.inf)

    def accept(lam):
        p = o + lam[:, None] * d
        if abs(k) < _CURVATURE_EPS:
            w = p[:, 1]
            ok = np.ones(len(lam), dtype=bool)
        else:
            phi = np.arctan2(k * p[:, 1], 1.0 - k * p[:, 2])
            w = phi / k
            ok = np.abs(phi) < math.pi / 2
        ok &= (p[:, 0] / hl) ** 2 + (w / hw) ** 2 <= 1.0
        ok &= lam > 1e-6
        return ok

    if abs(k) < _CURVATURE_EPS:
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = -o[2] / d[:, 2]
        lam = np.where(np.isfinite(lam), lam, -1.0)
        ok = accept(lam)
        out[ok] = lam[ok]
        return out

    rk = 1.0 / k
    oz = o[2] - rk
    A = d[:, 1] ** 2 + d[:, 2] ** 2
    B = 2.0 * (o[1] * d[:, 1] + oz * d[:, 2])
    C = o[1] ** 2 + oz ** 2 - rk * rk
    disc = B * B - 4 * A * C
    hit = (disc >= 0) & (A > 0)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    qq = -0.5 * (B + np.copysign(sq, B))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(hit, qq / A, -1.0)
        r2 = np.where(hit & (qq != 0), C / qq, -1.0)
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    for lam in (lo, hi):
        ok = hit & accept(lam) & ~np.isfinite(out)
        out[ok] = lam[ok]
    return out


_PALETTE = np.array([[46, 139, 87], [107, 142, 35], [34, 139, 34], [154, 205, 50],
                     [85, 107, 47], [60, 179, 113], [0, 100, 0], [124, 252, 0]], dtype=np.uint8)


def render(scene: Scene, K: CameraIntrinsics = DEFAULT_INTRINSICS, noise: NoiseModel = NoiseModel(),
           rng_seed: int | None = None):
    """Rasterize ``scene`` into ``(Observation, masks, gt_records)``.

    Depth is float32 meters, 0 where nothing was hit or the sensor dropped
    out. Masks are the noiseless z-buffer ownership of each leaf.
    """
    rng = np.random.default_rng(scene.seed if rng_seed is None else rng_seed)
    H, W = K.height, K.width
    rays = K.rays()
    zbuf = np.full((H, W), np.inf)
    owner = np.full((H, W), -1, dtype=int)
    gts = []
    for i, leaf in enumerate(scene.leaves):
        T_cam_leaf = compose(scene.camera_pose, leaf.gt_pose.as_transform())
        v0, v1, u0, u1 = _pixel_window(leaf, T_cam_leaf, K)
        if v1 > v0 and u1 > u0:
            lam = _intersect_leaf(leaf, T_cam_leaf, rays[v0:v1, u0:u1].reshape(-1, 3))
            lam = lam.reshape(v1 - v0, u1 - u0)
            sub = zbuf[v0:v1, u0:u1]
            closer = lam < sub
            sub[closer] = lam[closer]
            owner[v0:v1, u0:u1][closer] = i
        R = quat_to_matrix(T_cam_leaf.rotation)
        gts.append((i, leaf.gt_pose, T_cam_leaf.translation.copy(), R[:, 2].copy()))

    masks = [owner == i for i in range(len(scene.leaves))]
    if not any(m.any() for m in masks):
        raise EmptyRender("no leaf projects into the image")

    hit = owner >= 0
    depth = np.where(hit, zbuf, 0.0)
    if noise.depth_sigma > 0:
        depth = depth + np.where(hit, rng.normal(0.0, noise.depth_sigma, size=(H, W)), 0.0)
    if noise.boundary_dropout_px > 0 and noise.dropout_rate > 0:
        band = np.zeros((H, W), dtype=bool)
        for m in masks:
            if m.any():
                inner = ndimage.binary_erosion(m, structure=np.ones((3, 3), bool),
                                               iterations=noise.boundary_dropout_px, border_value=0)
                band |= m & ~inner
        drop = band & (rng.random((H, W)) < noise.dropout_rate)
        depth[drop] = 0.0
    depth = np.clip(depth, 0.0, None).astype(np.float32)

    image = np.full((H, W, 3), 40, dtype=np.uint8)
    for i, m in enumerate(masks):
        image[m] = _PALETTE[i % len(_PALETTE)]

    records = [GtRecord(i, pose, c, n, int(masks[i].sum())) for i, pose, c, n in gts]
    return Observation(image, depth, K), masks, records
