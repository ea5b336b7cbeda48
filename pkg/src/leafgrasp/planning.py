"""Collision checking and RRT-Connect planning in joint space.

The robot is a chain of capsules, one per link with non-zero DH length plus
one for the tool. Obstacles are oriented boxes; leaves become thin boxes.
Distances are exact: a capsule hits a box when its core segment comes
within the capsule radius of the box.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import GoalInCollision, LengthMismatch, PlanningTimeout, StartInCollision
from .geometry import Pose, Transform, as_vec3, quat_to_matrix, transform_pose
from .kinematics import ArmModel, chain_frames

logger = logging.getLogger(__name__)

LEAF_HALF_THICKNESS = 0.002
_EPS = 1e-12
_TINY = 1e-300  # squared lengths below this are treated as points


# ---------------------------------------------------------------- primitives

def segment_segment_distance(p1, q1, p2, q2) -> np.ndarray:
    """Closest distance between segments ``p1q1`` and ``p2q2`` (broadcasting over leading axes)."""
    p1, q1, p2, q2 = (np.asarray(x, dtype=float) for x in (p1, q1, p2, q2))
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("...i,...i", d1, d1)
    e = np.einsum("...i,...i", d2, d2)
    f = np.einsum("...i,...i", d2, r)
    c = np.einsum("...i,...i", d1, r)
    b = np.einsum("...i,...i", d1, d2)
    denom = a * e - b * b
    a_ok = a > _TINY
    e_ok = e > _TINY
    safe_a = np.where(a_ok, a, 1.0)
    safe_e = np.where(e_ok, e, 1.0)
    # general case: clamp s on the infinite-line solution, then fix t and re-clamp s
    s = np.where(denom > _EPS * a * e, np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0, 1), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0, np.clip(-c / safe_a, 0, 1), np.where(t > 1, np.clip((b - c) / safe_a, 0, 1), s))
    t = np.clip(t, 0, 1)
    # degenerate segments are points
    s = np.where(a_ok, np.where(e_ok, s, np.clip(-c / safe_a, 0, 1)), 0.0)
    t = np.where(e_ok, np.where(a_ok, t, np.clip(f / safe_e, 0, 1)), 0.0)
    c1 = p1 + s[..., None] * d1
    c2 = p2 + t[..., None] * d2
    d = np.linalg.norm(c1 - c2, axis=-1)
    # near-parallel pairs take the s = 0 branch above, which is only exact for truly parallel lines;
    # any non-interior minimum has an endpoint on one segment, so the endpoint distances close the gap
    ends = [_point_segment_distance(p1, p2, d2, e), _point_segment_distance(q1, p2, d2, e),
            _point_segment_distance(p2, p1, d1, a), _point_segment_distance(q2, p1, d1, a)]
    return np.minimum(d, np.minimum.reduce(ends))


def _point_segment_distance(x, p, d, dd) -> np.ndarray:
    """Distance from ``x`` to segment ``p + u d`` (u in [0, 1]); ``dd`` is ``d . d``."""
    u = np.clip(np.einsum("...i,...i", x - p, d) / np.where(dd > _TINY, dd, 1.0), 0.0, 1.0)
    return np.linalg.norm(x - p - u[..., None] * d, axis=-1)


def point_box_distance(p, half) -> np.ndarray:
    """Distance from box-local points to an origin-centred box with ``half`` extents."""
    return np.linalg.norm(np.maximum(np.abs(p) - half, 0.0), axis=-1)


def _segment_hits_box(p, q, half) -> np.ndarray:
    """Slab test for box-local segments; True where the segment enters the box."""
    d = q - p
    small = np.abs(d) < _EPS
    safe = np.where(small, 1.0, d)
    t1 = (-half - p) / safe
    t2 = (half - p) / safe
    tmin = np.where(small, -np.inf, np.minimum(t1, t2))
    tmax = np.where(small, np.inf, np.maximum(t1, t2))
    inside_flat = np.all(~small | (np.abs(p) <= half), axis=-1)
    lo = np.maximum(tmin.max(axis=-1), 0.0)
    hi = np.minimum(tmax.min(axis=-1), 1.0)
    return inside_flat & (lo <= hi)


_EDGE_SIGNS = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=float)


def _box_edges(half: np.ndarray):
    """The 12 edges of an origin-centred box, as (start, end) arrays shaped (..., 12, 3)."""
    starts, ends = [], []
    for k in range(3):
        o1, o2 = [j for j in range(3) if j != k]
        for s1, s2 in _EDGE_SIGNS:
            a = np.zeros(half.shape)
            a[..., o1] = s1 * half[..., o1]
            a[..., o2] = s2 * half[..., o2]
            b = a.copy()
            a[..., k] = -half[..., k]
            b[..., k] = half[..., k]
            starts.append(a)
            ends.append(b)
    return np.stack(starts, axis=-2), np.stack(ends, axis=-2)


def segment_box_distance(p, q, center, R, half) -> np.ndarray:
    """Exact distance between segment ``pq`` and the oriented box (``center``, rotation ``R``, ``half``).

    Zero when they intersect; otherwise the minimum over the segment
    endpoints and the twelve box edges, which always contains the optimum.
    """
    p, q, center, R, half = (np.asarray(x, dtype=float) for x in (p, q, center, R, half))
    pl = np.einsum("...ji,...j->...i", R, p - center)
    ql = np.einsum("...ji,...j->...i", R, q - center)
    half_b = np.broadcast_to(half, pl.shape)
    ends = np.minimum(point_box_distance(pl, half_b), point_box_distance(ql, half_b))
    es, ee = _box_edges(np.array(half_b))
    edge = segment_segment_distance(pl[..., None, :], ql[..., None, :], es, ee).min(axis=-1)
    dist = np.minimum(ends, edge)
    return np.where(_segment_hits_box(pl, ql, half_b), 0.0, dist)


# ---------------------------------------------------------------- scene

@dataclass(frozen=True, eq=False)
class Box:
    center: Pose
    half_extents: np.ndarray
    leaf_id: int | None = None

    def __post_init__(self):
        h = as_vec3(self.half_extents)
        if np.any(h <= 0):
            raise ValueError("box half-extents must be positive")
        object.__setattr__(self, "half_extents", h)

    def to_json(self) -> dict:
        return {"pose": self.center.to_json(), "half_extents": self.half_extents.tolist(),
                "leaf_id": self.leaf_id}

    @classmethod
    def from_json(cls, d: dict) -> "Box":
        return cls(Pose.from_json(d["pose"]), np.asarray(d["half_extents"], dtype=float), d.get("leaf_id"))


def leaf_box(pose: Pose, length: float, width: float, leaf_id: int | None = None) -> Box:
    """Thin box spanning a leaf: in-plane extents from its size, 2 mm along the normal."""
    return Box(pose, np.array([0.5 * length, 0.5 * width, LEAF_HALF_THICKNESS]), leaf_id)


@dataclass(frozen=True, eq=False)
class CollisionScene:
    obstacles: tuple[Box, ...] = ()
    robot_radii: tuple[float, ...] | None = None  # overrides arm.capsule_radii
    allowed_target: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.robot_radii is not None and min(self.robot_radii) <= 0:
            raise ValueError("capsule radii must be positive")

    def with_target(self, leaf_id: int | None) -> "CollisionScene":
        return replace(self, allowed_target=leaf_id)

    def active_boxes(self) -> list[Box]:
        return [b for b in self.obstacles if self.allowed_target is None or b.leaf_id != self.allowed_target]

    def transformed(self, T: Transform) -> "CollisionScene":
        boxes = tuple(Box(transform_pose(T, b.center), b.half_extents, b.leaf_id) for b in self.obstacles)
        return replace(self, obstacles=boxes)

    def to_json(self) -> dict:
        return {"obstacles": [b.to_json() for b in self.obstacles],
                "robot_radii": list(self.robot_radii) if self.robot_radii else None,
                "allowed_target": self.allowed_target}

    @classmethod
    def from_json(cls, d: dict) -> "CollisionScene":
        return cls(tuple(Box.from_json(b) for b in d.get("obstacles", [])),
                   tuple(d["robot_radii"]) if d.get("robot_radii") else None, d.get("allowed_target"))


class _Checker:
    """Precomputed arrays for batched collision queries against one scene."""

    def __init__(self, arm: ArmModel, scene: CollisionScene):
        self.arm = arm
        radii = np.asarray(scene.robot_radii or arm.capsule_radii, dtype=float)
        if len(radii) != arm.dof + 1:
            raise LengthMismatch("need one capsule radius per link plus the tool")
        lengths = [l.length for l in arm.links] + [float(np.linalg.norm(arm.tool_offset.translation))]
        # segment k joins chain point k to k+1; zero-length links are covered by their neighbours
        self.seg = np.array([k for k, L in enumerate(lengths) if L > 1e-9], dtype=int)
        self.radii = radii[self.seg]
        n = len(self.seg)
        pairs = [(i, j) for i in range(n) for j in range(i + 2, n)]
        self.pi = np.array([p[0] for p in pairs], dtype=int)
        self.pj = np.array([p[1] for p in pairs], dtype=int)
        boxes = scene.active_boxes()
        self.nbox = len(boxes)
        if boxes:
            self.bc = np.array([b.center.position for b in boxes])
            self.bR = np.array([quat_to_matrix(b.center.orientation) for b in boxes])
            self.bh = np.array([b.half_extents for b in boxes])

    def segments(self, Q: np.ndarray):
        P = chain_frames(self.arm, Q)[..., :3, 3]
        return P[..., self.seg, :], P[..., self.seg + 1, :]

    def __call__(self, Q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[-1] != self.arm.dof:
            raise LengthMismatch(f"expected {self.arm.dof} joint values, got {Q.shape[-1]}")
        a, b = self.segments(Q)  # (m, S, 3)
        hit = np.zeros(len(Q), dtype=bool)
        if len(self.pi):
            d = segment_segment_distance(a[:, self.pi], b[:, self.pi], a[:, self.pj], b[:, self.pj])
            hit |= np.any(d <= self.radii[self.pi] + self.radii[self.pj], axis=1)
        if self.nbox:
            A = a[:, :, None, :]
            B = b[:, :, None, :]
            d = segment_box_distance(A, B, self.bc[None, None], self.bR[None, None], self.bh[None, None])
            hit |= np.any(d <= self.radii[None, :, None], axis=(1, 2))
        return hit


def collides_batch(arm: ArmModel, Q, scene: CollisionScene) -> np.ndarray:
    return _Checker(arm, scene)(Q)


def collides(arm: ArmModel, q, scene: CollisionScene) -> bool:
    """True when the arm at ``q`` touches itself (non-adjacent capsules) or an obstacle."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or len(q) != arm.dof:
        raise LengthMismatch(f"expected {arm.dof} joint values")
    return bool(_Checker(arm, scene)(q[None])[0])


# ---------------------------------------------------------------- paths

def interpolate(a: np.ndarray, b: np.ndarray, resolution: float) -> np.ndarray:
    """States strictly after ``a`` up to and including ``b``, per-joint step <= resolution."""
    n = max(1, int(math.ceil(np.max(np.abs(b - a)) / resolution - 1e-12)))
    s = np.arange(1, n + 1)[:, None] / n
    return a + s * (b - a)


@dataclass(frozen=True, eq=False)
class Path:
    waypoints: np.ndarray
    resolution: float

    def __post_init__(self):
        object.__setattr__(self, "waypoints", np.atleast_2d(np.asarray(self.waypoints, dtype=float)))

    def __len__(self) -> int:
        return len(self.waypoints)

    def densify(self) -> np.ndarray:
        out = [self.waypoints[:1]]
        for a, b in zip(self.waypoints[:-1], self.waypoints[1:]):
            out.append(interpolate(a, b, self.resolution))
        return np.vstack(out)

    def arc_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())


@dataclass(frozen=True)
class PlannerConfig:
    step_size: float = 0.1
    goal_bias: float = 0.05
    max_iterations: int = 5000
    rng_seed: int = 0
    resolution: float | None = None  # defaults to step_size / 4
    shortcut_attempts: int = 100

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")

    @property
    def check_resolution(self) -> float:
        return self.resolution if self.resolution is not None else self.step_size / 4

    def to_json(self) -> dict:
        return {"step_size": self.step_size, "goal_bias": self.goal_bias, "max_iterations": self.max_iterations,
                "rng_seed": self.rng_seed, "resolution": self.resolution,
                "shortcut_attempts": self.shortcut_attempts}

    @classmethod
    def from_json(cls, d: dict) -> "PlannerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class _Tree:
    def __init__(self, root: np.ndarray, capacity: int = 256):
        self.nodes = np.empty((capacity, len(root)))
        self.nodes[0] = root
        self.parent = [-1]
        self.size = 1

    def add(self, q: np.ndarray, parent: int) -> int:
        if self.size == len(self.nodes):
            self.nodes = np.vstack([self.nodes, np.empty_like(self.nodes)])
        self.nodes[self.size] = q
        self.parent.append(parent)
        self.size += 1
        return self.size - 1

    def nearest(self, q: np.ndarray) -> int:
        d = self.nodes[:self.size] - q
        return int(np.argmin(np.einsum("ij,ij->i", d, d)))

    def branch(self, idx: int) -> list[np.ndarray]:
        out = []
        while idx >= 0:
            out.append(self.nodes[idx].copy())
            idx = self.parent[idx]
        return out


_TRAPPED, _ADVANCED, _REACHED = 0, 1, 2


def plan_rrtc(arm: ArmModel, q_start, q_goal, scene: CollisionScene, cfg: PlannerConfig = PlannerConfig()) -> Path:
    """Bidirectional RRT-Connect from ``q_start`` to ``q_goal``.

    Trees alternate roles each iteration: one extends toward a random
    sample, the other greedily connects to the new node. Every edge is
    validated at ``cfg.check_resolution`` before insertion.
    """
    start = np.asarray(q_start, dtype=float).copy()
    goal = np.asarray(q_goal, dtype=float).copy()
    if start.shape != (arm.dof,) or goal.shape != (arm.dof,):
        raise LengthMismatch(f"expected {arm.dof} joint values")
    check = _Checker(arm, scene)
    res = cfg.check_resolution
    if check(start)[0]:
        raise StartInCollision("start configuration is in collision")
    if check(goal)[0]:
        raise GoalInCollision("goal configuration is in collision")
    if np.array_equal(start, goal):
        return Path(start[None], res)

    rng = np.random.default_rng(cfg.rng_seed)
    lo, hi = arm.lower, arm.upper

    def edge_free(a, b) -> bool:
        return not check(interpolate(a, b, res)).any()

    def extend(tree: _Tree, target: np.ndarray):
        near = tree.nearest(target)
        qn = tree.nodes[near]
        delta = target - qn
        dist = float(np.linalg.norm(delta))
        if dist <= cfg.step_size:
            q_new, status = target, _REACHED
        else:
            q_new, status = qn + delta * (cfg.step_size / dist), _ADVANCED
        if dist == 0.0:
            return _REACHED, near
        if not edge_free(qn, q_new):
            return _TRAPPED, near
        return status, tree.add(q_new, near)

    def connect(tree: _Tree, target: np.ndarray):
        while True:
            status, idx = extend(tree, target)
            if status != _ADVANCED:
                return status, idx

    ta, tb = _Tree(start), _Tree(goal)
    a_is_start = True
    for it in range(cfg.max_iterations):
        if rng.random() < cfg.goal_bias:
            q_rand = tb.nodes[0]
        else:
            q_rand = rng.uniform(lo, hi)
        status, ia = extend(ta, q_rand)
        if status != _TRAPPED:
            status_b, ib = connect(tb, ta.nodes[ia])
            if status_b == _REACHED:
                # the two meeting nodes coincide; keep one of them
                if a_is_start:
                    nodes = ta.branch(ia)[::-1] + tb.branch(ib)[1:]
                else:
                    nodes = tb.branch(ib)[::-1] + ta.branch(ia)[1:]
                wp = np.array(nodes)
                wp[0], wp[-1] = start, goal
                logger.debug("rrtc connected after %d iterations (%d + %d nodes)", it + 1, ta.size, tb.size)
                return Path(wp, res)
        ta, tb = tb, ta
        a_is_start = not a_is_start
    raise PlanningTimeout(f"no connection after {cfg.max_iterations} iterations")


def path_is_valid(arm: ArmModel, path: Path, scene: CollisionScene) -> bool:
    return not collides_batch(arm, path.densify(), scene).any()


def shortcut(path: Path, scene: CollisionScene, arm: ArmModel, attempts: int = 100, rng_seed: int = 0) -> Path:
    """Random pairwise shortcutting; replaced spans are re-validated at the path resolution."""
    wp = [w for w in path.waypoints]
    if attempts <= 0 or len(wp) < 3:
        return Path(np.array(wp), path.resolution)
    check = _Checker(arm, scene)
    rng = np.random.default_rng(rng_seed)
    for _ in range(attempts):
        if len(wp) < 3:
            break
        i, j = sorted(rng.choice(len(wp), size=2, replace=False))
        if j - i < 2:
            continue
        if not check(interpolate(wp[i], wp[j], path.resolution)).any():
            wp = wp[:i + 1] + wp[j:]
    return Path(np.array(wp), path.resolution)
