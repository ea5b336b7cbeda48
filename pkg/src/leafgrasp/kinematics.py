"""Serial-chain kinematics with standard Denavit-Hartenberg links.

Each link transform is ``Rz(theta + offset) Tz(d) Tx(a) Rx(alpha)``. The
full chain is ``base_pose * A_1 ... A_n * tool_offset``. IK is damped least
squares on the stacked position / rotation-vector error.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, NoSolution
from .geometry import Pose, Transform, quat_log, quat_mul, quat_conj, quat_angle, matrix_to_quat, rot_x

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DHLink:
    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0
    joint_min: float = -math.pi
    joint_max: float = math.pi

    def __post_init__(self):
        if not self.joint_min < self.joint_max:
            raise ValueError(f"joint_min {self.joint_min} must be < joint_max {self.joint_max}")

    @property
    def length(self) -> float:
        return math.hypot(self.a, self.d)


@dataclass(frozen=True, eq=False)
class ArmModel:
    links: tuple[DHLink, ...]
    base_pose: Transform = field(default_factory=Transform)
    tool_offset: Transform = field(default_factory=Transform)
    capsule_radii: tuple[float, ...] | None = None  # one per link plus one for the tool segment
    home: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        if not self.links:
            raise ValueError("an arm needs at least one link")
        radii = self.capsule_radii or (0.03,) * (len(self.links) + 1)
        if len(radii) != len(self.links) + 1 or min(radii) <= 0:
            raise ValueError("capsule_radii needs one positive radius per link plus the tool")
        object.__setattr__(self, "capsule_radii", tuple(float(r) for r in radii))
        home = tuple(self.home) if self.home is not None else tuple(0.0 for _ in self.links)
        if len(home) != len(self.links):
            raise LengthMismatch("home configuration has the wrong length")
        object.__setattr__(self, "home", tuple(float(h) for h in home))

    @property
    def dof(self) -> int:
        return len(self.links)

    @property
    def lower(self) -> np.ndarray:
        return np.array([l.joint_min for l in self.links])

    @property
    def upper(self) -> np.ndarray:
        return np.array([l.joint_max for l in self.links])

    @property
    def reach(self) -> float:
        """Upper bound on the distance from the base origin to the tool point."""
        return sum(l.length for l in self.links) + float(np.linalg.norm(self.tool_offset.translation))

    def within_limits(self, q, tol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))

    def to_json(self) -> dict:
        return {
            "links": [{"a": l.a, "alpha": l.alpha, "d": l.d, "theta_offset": l.theta_offset,
                       "joint_min": l.joint_min, "joint_max": l.joint_max} for l in self.links],
            "base_pose": self.base_pose.to_json(),
            "tool_offset": self.tool_offset.to_json(),
            "capsule_radii": list(self.capsule_radii),
            "home": list(self.home),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArmModel":
        links = tuple(DHLink(float(r["a"]), float(r["alpha"]), float(r["d"]), float(r.get("theta_offset", 0.0)),
                             float(r.get("joint_min", -math.pi)), float(r.get("joint_max", math.pi)))
                      for r in d["links"])
        return cls(links,
                   Transform.from_json(d["base_pose"]) if "base_pose" in d else Transform(),
                   Transform.from_json(d["tool_offset"]) if "tool_offset" in d else Transform(),
                   tuple(d["capsule_radii"]) if d.get("capsule_radii") else None,
                   tuple(d["home"]) if d.get("home") else None)


def default_arm() -> ArmModel:
    """Generic 6R arm with a spherical wrist and 0.9 m total reach (tool included).

    Dimensions are a plausible collaborative-arm layout, not the DH table of
    any particular product. The tool frame sits 12 cm past the flange and is
    flipped about x so its z axis points back along the approach direction;
    aligning it with a leaf normal that faces the robot makes the gripper
    approach the leaf from the camera side.
    """
    h = math.pi / 2
    links = (
        DHLink(0.0, h, 0.15, 0.0, -math.pi, math.pi),
        DHLink(0.30, 0.0, 0.0, 0.0, -math.pi, math.pi),
        DHLink(0.0, h, 0.0, h, -2.6, 2.6),
        DHLink(0.0, -h, 0.28, 0.0, -math.pi, math.pi),
        DHLink(0.0, h, 0.0, 0.0, -math.pi, math.pi),
        DHLink(0.0, 0.0, 0.05, 0.0, -math.pi, math.pi),
    )
    tool = Transform(rot_x(math.pi), np.array([0.0, 0.0, 0.12]))
    # forearm + tool radii stay below the 5 cm wrist offset so a straight wrist is collision-free
    radii = (0.06, 0.05, 0.04, 0.03, 0.03, 0.03, 0.015)
    home = (0.0, 2.3, -1.6, 0.0, -0.7, 0.0)
    return ArmModel(links, Transform(), tool, radii, home)


def _check(arm: ArmModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != arm.dof:
        raise LengthMismatch(f"expected {arm.dof} joint values, got {q.shape[-1]}")
    return q


def _dh_params(arm: ArmModel):
    a = np.array([l.a for l in arm.links])
    alpha = np.array([l.alpha for l in arm.links])
    d = np.array([l.d for l in arm.links])
    off = np.array([l.theta_offset for l in arm.links])
    return a, alpha, d, off


def link_matrices(arm: ArmModel, q) -> np.ndarray:
    """Per-link DH transforms, shape (..., n, 4, 4)."""
    q = _check(arm, q)
    a, alpha, d, off = _dh_params(arm)
    th = q + off
    ct, st = np.cos(th), np.sin(th)
    ca, sa = np.cos(alpha), np.sin(alpha)
    A = np.zeros(q.shape + (4, 4))
    A[..., 0, 0] = ct
    A[..., 0, 1] = -st * ca
    A[..., 0, 2] = st * sa
    A[..., 0, 3] = a * ct
    A[..., 1, 0] = st
    A[..., 1, 1] = ct * ca
    A[..., 1, 2] = -ct * sa
    A[..., 1, 3] = a * st
    A[..., 2, 1] = sa
    A[..., 2, 2] = ca
    A[..., 2, 3] = d
    A[..., 3, 3] = 1.0
    return A


def chain_frames(arm: ArmModel, q) -> np.ndarray:
    """World frames of the base, every link and the tool: shape (..., n + 2, 4, 4).

    Index 0 is ``base_pose``, index i the frame after link i, and the last
    entry the tool (gripper) frame. Accepts a batch of configurations.
    """
    A = link_matrices(arm, q)
    batch = A.shape[:-3]
    n = arm.dof
    F = np.empty(batch + (n + 2, 4, 4))
    F[..., 0, :, :] = arm.base_pose.matrix
    for i in range(n):
        F[..., i + 1, :, :] = F[..., i, :, :] @ A[..., i, :, :]
    F[..., n + 1, :, :] = F[..., n, :, :] @ arm.tool_offset.matrix
    return F


def fk(arm: ArmModel, q) -> Pose:
    """Gripper pose for joint vector ``q``."""
    M = chain_frames(arm, np.asarray(q, dtype=float))[-1]
    return Pose(M[:3, 3], matrix_to_quat(M[:3, :3]))


def fk_matrix(arm: ArmModel, q) -> np.ndarray:
    return chain_frames(arm, np.asarray(q, dtype=float))[-1]


def _jacobian_from_frames(F: np.ndarray, n: int) -> np.ndarray:
    p_e = F[n + 1, :3, 3]
    z = F[:n, :3, 2]
    o = F[:n, :3, 3]
    J = np.empty((6, n))
    J[:3] = np.cross(z, p_e - o).T
    J[3:] = z.T
    return J


def jacobian(arm: ArmModel, q) -> np.ndarray:
    """Geometric Jacobian at the tool point, rows (v, omega) in the base frame."""
    q = _check(arm, np.asarray(q, dtype=float).reshape(-1))
    return _jacobian_from_frames(chain_frames(arm, q), arm.dof)


def numerical_jacobian(arm: ArmModel, q, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian; angular rows from the rotation log."""
    q = _check(arm, np.asarray(q, dtype=float).reshape(-1))
    J = np.empty((6, arm.dof))
    for i in range(arm.dof):
        dq = np.zeros(arm.dof)
        dq[i] = h
        Mp, Mm = fk_matrix(arm, q + dq), fk_matrix(arm, q - dq)
        J[:3, i] = (Mp[:3, 3] - Mm[:3, 3]) / (2 * h)
        dR = Mp[:3, :3] @ Mm[:3, :3].T
        J[3:, i] = quat_log(matrix_to_quat(dR)) / (2 * h)
    return J


def pose_error(current: np.ndarray, target: Pose) -> np.ndarray:
    """6-vector (dp, rotation vector) taking ``current`` (4x4) to ``target``."""
    e = np.empty(6)
    e[:3] = target.position - current[:3, 3]
    qc = matrix_to_quat(current[:3, :3])
    e[3:] = quat_log(quat_mul(target.orientation, quat_conj(qc)))
    return e


@dataclass(frozen=True)
class IKConfig:
    tol_pos: float = 1e-4
    tol_rot: float = 1e-3
    max_iter: int = 200
    damping: float = 0.05
    max_restarts: int = 10
    max_step: float = 0.5  # rad, per-iteration cap on |dq|
    stall_window: int = 20
    stall_ratio: float = 0.999


def _converged(e: np.ndarray, cfg: IKConfig) -> bool:
    return np.linalg.norm(e[:3]) <= cfg.tol_pos and np.linalg.norm(e[3:]) <= cfg.tol_rot


def _dls(arm: ArmModel, target: Pose, q0: np.ndarray, cfg: IKConfig):
    lo, hi = arm.lower, arm.upper
    q = np.clip(q0, lo, hi)
    lam2 = cfg.damping ** 2
    best = math.inf
    history = []
    for _ in range(cfg.max_iter + 1):
        F = chain_frames(arm, q)
        e = pose_error(F[-1], target)
        if _converged(e, cfg):
            return q, True
        err = float(np.linalg.norm(e))
        history.append(err)
        best = min(best, err)
        if len(history) > cfg.stall_window and err > cfg.stall_ratio * history[-cfg.stall_window - 1]:
            break
        J = _jacobian_from_frames(F, arm.dof)
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(6), e)
        step = np.linalg.norm(dq)
        if step > cfg.max_step:
            dq *= cfg.max_step / step
        q = np.clip(q + dq, lo, hi)
    return q, False


def solve_ik(arm: ArmModel, target: Pose, seed, tol_pos: float = 1e-4, tol_rot: float = 1e-3,
             max_iter: int = 200, rng_seed: int = 0, config: IKConfig | None = None) -> np.ndarray:
    """Joint vector reaching ``target`` within tolerance, else :class:`NoSolution`.

    Starts from ``seed``; when damped least squares stalls, restarts from
    uniformly random configurations drawn with ``rng_seed``.
    """
    cfg = config or IKConfig(tol_pos=tol_pos, tol_rot=tol_rot, max_iter=max_iter)
    seed = _check(arm, np.asarray(seed, dtype=float).reshape(-1))
    shoulder = arm.base_pose.translation
    if np.linalg.norm(target.position - shoulder) > arm.reach + cfg.tol_pos:
        raise NoSolution("target lies outside the reachable sphere")
    rng = np.random.default_rng(rng_seed)
    lo, hi = arm.lower, arm.upper
    start = seed
    for attempt in range(cfg.max_restarts + 1):
        q, ok = _dls(arm, target, start, cfg)
        if ok:
            # re-verify the returned value against the exact contract
            p = fk(arm, q)
            if (np.linalg.norm(p.position - target.position) <= cfg.tol_pos
                    and quat_angle(p.orientation, target.orientation) <= cfg.tol_rot
                    and arm.within_limits(q)):
                return q
        start = rng.uniform(lo, hi)
    raise NoSolution(f"no IK solution after {cfg.max_restarts} restarts")
