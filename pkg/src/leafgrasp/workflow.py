"""Batch manipulation workflow, simulated spectral acquisition and LPB metrics.

A batch is processed nearest leaf first. For each leaf the five candidate
poses are tried in order: IK, then RRT-Connect from the home configuration,
then kinematic execution and a grasp check against ground truth. The first
verified grasp ends that leaf's loop; any failure (IK, planning, execution
or grasp) moves on to the next pose.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateReference, EmptyInput, NoSolution, PlanningFailure
from .geometry import Pose, Transform, pose_distance, transform_pose
from .kinematics import ArmModel, IKConfig, fk, solve_ik
from .perception import PerceptionReport, PoseSet, perceive_report
from .planning import CollisionScene, PlannerConfig, leaf_box, plan_rrtc, shortcut
from .scenegen import NOISE_PRESETS, Scene, gen_batch, render

logger = logging.getLogger(__name__)

DEFAULT_LEAF_SIZE = (0.08, 0.04)


def derive_seed(*parts: int) -> int:
    """Stable 31-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] >> 1)


# ---------------------------------------------------------------- frames

def to_base_frame(posesets: list[PoseSet], extrinsic: Transform) -> list[PoseSet]:
    """Map camera-frame pose sets into the robot base frame (distances stay camera-relative)."""
    return [PoseSet(ps.leaf_id, tuple(transform_pose(extrinsic, p) for p in ps.poses), ps.camera_distance)
            for ps in posesets]


def leaf_obstacles(report: PerceptionReport, extrinsic: Transform) -> CollisionScene:
    """One thin box per perceived leaf, sized from its filtered cloud, in the base frame."""
    boxes = []
    for ps in report.posesets:
        frame = report.frames.get(ps.leaf_id)
        cloud = report.clouds.get(ps.leaf_id)
        if frame is not None and cloud is not None and len(cloud) >= 3:
            local = (cloud.points - frame.center) @ frame.matrix
            length, width = 2 * np.abs(local[:, 0]).max(), 2 * np.abs(local[:, 1]).max()
            length, width = max(length, 0.005), max(width, 0.005)
        else:
            length, width = DEFAULT_LEAF_SIZE
        pose = transform_pose(extrinsic, ps.poses[0])
        boxes.append(leaf_box(pose, length, width, ps.leaf_id))
    return CollisionScene(tuple(boxes))


# ---------------------------------------------------------------- grasping

@dataclass(frozen=True)
class GraspTolerance:
    position: float = 0.01  # m
    angle: float = 0.35  # rad, gripper z vs leaf normal, either face

    def to_json(self) -> dict:
        return {"position": self.position, "angle": self.angle}


def grasp_check(ee_pose: Pose, gt_leaf: Pose, tol_pos: float = 0.01, tol_ang: float = 0.35) -> bool:
    """Position within ``tol_pos`` and gripper normal within ``tol_ang`` of the leaf normal (sign-free)."""
    if np.linalg.norm(ee_pose.position - gt_leaf.position) > tol_pos:
        return False
    c = abs(float(ee_pose.normal @ gt_leaf.normal))
    return math.acos(min(1.0, c)) <= tol_ang


# ---------------------------------------------------------------- spectra

@dataclass(frozen=True)
class SensorConfig:
    wl_min: float = 400.0
    wl_max: float = 1010.0
    wl_step: float = 5.0
    white_level: float = 30000.0  # counts at the lamp peak
    dark_level: float = 600.0
    noise_std: float = 30.0  # counts

    @property
    def wavelengths(self) -> np.ndarray:
        n = int(round((self.wl_max - self.wl_min) / self.wl_step)) + 1
        return self.wl_min + self.wl_step * np.arange(n)

    def references(self) -> tuple[np.ndarray, np.ndarray]:
        """(white, dark) reference counts from the built-in lamp."""
        wl = self.wavelengths
        lamp = 0.55 + 0.45 * np.exp(-0.5 * ((wl - 720.0) / 220.0) ** 2)
        white = self.white_level * lamp
        dark = self.dark_level + 20.0 * np.sin(wl / 37.0)
        return white, dark


def leaf_transmittance(wavelengths) -> np.ndarray:
    """Smooth synthetic leaf transmittance: low blue, green bump, red dip, NIR plateau."""
    wl = np.asarray(wavelengths, dtype=float)
    green = 0.12 * np.exp(-0.5 * ((wl - 550.0) / 30.0) ** 2)
    red_dip = -0.02 * np.exp(-0.5 * ((wl - 675.0) / 15.0) ** 2)
    red_edge = 0.45 / (1.0 + np.exp(-(wl - 715.0) / 12.0))
    water = -0.04 * np.exp(-0.5 * ((wl - 970.0) / 20.0) ** 2)
    return np.clip(0.03 + green + red_dip + red_edge + water, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class SpectralSample:
    wavelengths: np.ndarray
    values: np.ndarray
    white_ref: np.ndarray
    dark_ref: np.ndarray
    synthetic: bool = True

    def to_json(self) -> dict:
        return {"synthetic": self.synthetic, "wavelengths": self.wavelengths.tolist(),
                "values": self.values.tolist(), "white_ref": self.white_ref.tolist(),
                "dark_ref": self.dark_ref.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SpectralSample":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("wavelengths", "values", "white_ref", "dark_ref")),
                   bool(d.get("synthetic", True)))


def calibrate(raw, white, dark) -> np.ndarray:
    """White/dark referencing: ``(raw - dark) / (white - dark)`` clamped to [0, 1]."""
    raw, white, dark = (np.asarray(x, dtype=float) for x in (raw, white, dark))
    span = white - dark
    if np.any(span <= 0):
        raise DegenerateReference("white reference does not exceed dark reference at every band")
    return np.clip((raw - dark) / span, 0.0, 1.0)


def acquire_spectrum(sensor: SensorConfig = SensorConfig(), rng_seed: int = 0,
                     transmittance=None, noise: bool = True) -> SpectralSample:
    """Simulate one measurement: raw = dark + (white - dark) * T + noise, then calibrate."""
    wl = sensor.wavelengths
    T = leaf_transmittance(wl) if transmittance is None else np.asarray(transmittance, dtype=float)
    white, dark = sensor.references()
    raw = dark + (white - dark) * T
    if noise and sensor.noise_std > 0:
        raw = raw + np.random.default_rng(rng_seed).normal(0.0, sensor.noise_std, size=wl.shape)
    return SpectralSample(wl, calibrate(raw, white, dark), white, dark)


# ---------------------------------------------------------------- records

class Failure(str, enum.Enum):
    NONE = "none"
    IK = "ik_failed"
    START_IN_COLLISION = "start_in_collision"
    GOAL_IN_COLLISION = "goal_in_collision"
    TIMEOUT = "timeout"
    PLANNING = "planning_failed"
    NOT_REACHED = "not_reached"
    GRASP_MISSED = "grasp_missed"


@dataclass
class ApproachRecord:
    leaf_id: int
    pose_index: int  # 1-5
    camera_distance: float = 0.0
    ik_ok: bool = False
    plan_ok: bool = False
    reached: bool = False
    grasped: bool = False
    spectrum: SpectralSample | None = None
    failure_reason: Failure = Failure.NONE
    path: np.ndarray | None = None  # executed waypoints after shortcutting
    position_error: float | None = None  # m, gripper vs true leaf center
    normal_error: float | None = None  # rad, sign-free

    @property
    def executed(self) -> bool:
        """An approach in the evaluation sense: a trajectory was planned and run."""
        return self.plan_ok

    def to_json(self) -> dict:
        return {
            "leaf_id": self.leaf_id, "pose_index": self.pose_index, "camera_distance": self.camera_distance,
            "ik_ok": self.ik_ok, "plan_ok": self.plan_ok, "reached": self.reached, "grasped": self.grasped,
            "failure_reason": self.failure_reason.value,
            "position_error": self.position_error, "normal_error": self.normal_error,
            "path": None if self.path is None else self.path.tolist(),
            "spectrum": None if self.spectrum is None else self.spectrum.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ApproachRecord":
        return cls(int(d["leaf_id"]), int(d["pose_index"]), float(d.get("camera_distance", 0.0)),
                   bool(d["ik_ok"]), bool(d["plan_ok"]), bool(d["reached"]), bool(d["grasped"]),
                   SpectralSample.from_json(d["spectrum"]) if d.get("spectrum") else None,
                   Failure(d.get("failure_reason", "none")),
                   np.asarray(d["path"], dtype=float) if d.get("path") is not None else None,
                   d.get("position_error"), d.get("normal_error"))


@dataclass
class BatchRun:
    scene_id: str
    posesets: list[PoseSet] = field(default_factory=list)  # base frame
    approaches: list[ApproachRecord] = field(default_factory=list)
    wall_time: float = 0.0
    setting: str = "default"
    dropped: list[tuple[int, str]] = field(default_factory=list)
    scene: Scene | None = None
    seed: int = 0
    preset: str = ""  # noise preset the scene was rendered with

    @property
    def n_approaches(self) -> int:
        return sum(1 for r in self.approaches if r.executed)

    @property
    def n_successes(self) -> int:
        return sum(1 for r in self.approaches if r.grasped)

    def approached_leaves(self) -> set[int]:
        return {r.leaf_id for r in self.approaches if r.executed}

    def grasped_leaves(self) -> set[int]:
        return {r.leaf_id for r in self.approaches if r.grasped}

    def to_json(self) -> dict:
        # wall_time is deliberately left out so results files are reproducible
        return {
            "scene_id": self.scene_id, "setting": self.setting, "seed": self.seed, "preset": self.preset,
            "scene": None if self.scene is None else self.scene.to_json(),
            "posesets": [ps.to_json() for ps in self.posesets],
            "dropped": [{"leaf_id": i, "reason": r} for i, r in self.dropped],
            "approaches": [a.to_json() for a in self.approaches],
        }

    @classmethod
    def from_json(cls, d: dict) -> "BatchRun":
        return cls(str(d["scene_id"]), [PoseSet.from_json(p) for p in d.get("posesets", [])],
                   [ApproachRecord.from_json(a) for a in d.get("approaches", [])], 0.0,
                   str(d.get("setting", "default")), [(int(x["leaf_id"]), x["reason"]) for x in d.get("dropped", [])],
                   Scene.from_json(d["scene"]) if d.get("scene") else None, int(d.get("seed", 0)),
                   str(d.get("preset", "")))


# ---------------------------------------------------------------- batch execution

def run_batch(scene: Scene, posesets: list[PoseSet], arm: ArmModel, extrinsic: Transform | None = None,
              planner_cfg: PlannerConfig = PlannerConfig(), grasp_tol: GraspTolerance = GraspTolerance(),
              *, obstacles: CollisionScene | None = None, sensor: SensorConfig = SensorConfig(),
              ik_config: IKConfig = IKConfig(), seed: int = 0, approach_offset: float = 0.0,
              setting: str = "default") -> BatchRun:
    """Attempt every perceived leaf of one batch.

    ``posesets`` are camera-frame outputs of perception; ``scene`` supplies
    ground truth for the grasp check (its world frame is the robot base).
    ``obstacles`` defaults to default-sized thin boxes at each perceived leaf.
    """
    t0 = time.perf_counter()
    extrinsic = extrinsic if extrinsic is not None else scene.extrinsic
    base_sets = to_base_frame(sorted(posesets, key=lambda p: (p.camera_distance, p.leaf_id)), extrinsic)
    if obstacles is None:
        obstacles = CollisionScene(tuple(
            leaf_box(ps.poses[0], *DEFAULT_LEAF_SIZE, leaf_id=ps.leaf_id) for ps in base_sets))
    home = np.array(arm.home)
    run = BatchRun(scene.scene_id, base_sets, setting=setting, scene=scene, seed=seed)

    for ps in base_sets:
        gt = scene.leaves[ps.leaf_id].gt_pose if 0 <= ps.leaf_id < len(scene.leaves) else None
        target_scene = obstacles.with_target(ps.leaf_id)
        for k, pose in enumerate(ps.poses, start=1):
            rec = ApproachRecord(ps.leaf_id, k, ps.camera_distance)
            run.approaches.append(rec)
            goal_pose = pose
            if approach_offset:
                goal_pose = Pose(pose.position - approach_offset * pose.normal, pose.orientation)
            try:
                q_goal = solve_ik(arm, goal_pose, home, rng_seed=derive_seed(seed, ps.leaf_id, k, 1),
                                  config=ik_config)
            except NoSolution:
                rec.failure_reason = Failure.IK
                continue
            rec.ik_ok = True
            cfg = PlannerConfig(planner_cfg.step_size, planner_cfg.goal_bias, planner_cfg.max_iterations,
                                derive_seed(seed, ps.leaf_id, k, 2), planner_cfg.resolution,
                                planner_cfg.shortcut_attempts)
            try:
                path = plan_rrtc(arm, home, q_goal, target_scene, cfg)
            except PlanningFailure as exc:
                rec.failure_reason = Failure(exc.reason)
                continue
            path = shortcut(path, target_scene, arm, cfg.shortcut_attempts, derive_seed(seed, ps.leaf_id, k, 3))
            rec.plan_ok = True
            rec.path = path.waypoints
            # kinematic execution: the arm ends exactly on the last waypoint
            ee = fk(arm, path.waypoints[-1])
            dp, dr = pose_distance(ee, goal_pose)
            rec.reached = dp <= ik_config.tol_pos and dr <= ik_config.tol_rot
            if gt is not None:
                rec.position_error = float(np.linalg.norm(ee.position - gt.position))
                rec.normal_error = math.acos(min(1.0, abs(float(ee.normal @ gt.normal))))
            if not rec.reached:
                rec.failure_reason = Failure.NOT_REACHED
            elif gt is not None and grasp_check(ee, gt, grasp_tol.position, grasp_tol.angle):
                rec.grasped = True
                rec.spectrum = acquire_spectrum(sensor, derive_seed(seed, ps.leaf_id, 4))
                # the arm retracts along its path, so every plan starts from home
                break
            else:
                rec.failure_reason = Failure.GRASP_MISSED
    run.wall_time = time.perf_counter() - t0
    return run


def process_scene(scene: Scene, arm: ArmModel, noise_preset: str = "lab", planner_cfg: PlannerConfig = PlannerConfig(),
                  grasp_tol: GraspTolerance = GraspTolerance(), *, K=None, extrinsic: Transform | None = None,
                  sensor: SensorConfig = SensorConfig(), seed: int = 0, setting: str = "default",
                  render_seed: int | None = None) -> tuple[BatchRun, PerceptionReport]:
    """Render, perceive and manipulate one scene."""
    from .geometry import DEFAULT_INTRINSICS

    t0 = time.perf_counter()
    K = K or DEFAULT_INTRINSICS
    obs, masks, _ = render(scene, K, NOISE_PRESETS[noise_preset], rng_seed=render_seed)
    report = perceive_report(obs, masks, K)
    extrinsic = extrinsic if extrinsic is not None else scene.extrinsic
    run = run_batch(scene, report.posesets, arm, extrinsic, planner_cfg, grasp_tol,
                    obstacles=leaf_obstacles(report, extrinsic), sensor=sensor, seed=seed, setting=setting)
    run.dropped = list(report.dropped)
    run.preset = noise_preset
    run.wall_time = time.perf_counter() - t0
    return run, report


@dataclass(frozen=True)
class ExperimentSetting:
    """A family of generated batches evaluated under one noise preset."""

    name: str
    preset: str = "lab"
    scenes: int = 10
    n_leaves: tuple[int, int] = (1, 3)
    occlusion: float = 0.0
    seed: int = 0

    def to_json(self) -> dict:
        return {"name": self.name, "preset": self.preset, "scenes": self.scenes,
                "n_leaves": list(self.n_leaves), "occlusion": self.occlusion, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentSetting":
        n = d.get("n_leaves", (1, 3))
        n = (int(n), int(n)) if isinstance(n, (int, float)) else (int(n[0]), int(n[1]))
        return cls(str(d["name"]), str(d.get("preset", "lab")), int(d.get("scenes", 10)), n,
                   float(d.get("occlusion", 0.0)), int(d.get("seed", 0)))


def generate_scenes(setting: ExperimentSetting) -> list[Scene]:
    rng = np.random.default_rng(setting.seed)
    scenes = []
    for i in range(setting.scenes):
        n = int(rng.integers(setting.n_leaves[0], setting.n_leaves[1] + 1))
        scenes.append(gen_batch(derive_seed(setting.seed, i), n, setting.occlusion,
                                scene_id=f"{setting.name}-{i:03d}"))
    return scenes


def run_setting(setting: ExperimentSetting, arm: ArmModel, planner_cfg: PlannerConfig = PlannerConfig(),
                grasp_tol: GraspTolerance = GraspTolerance(), sensor: SensorConfig = SensorConfig()) -> list[BatchRun]:
    runs = []
    for i, scene in enumerate(generate_scenes(setting)):
        run, _ = process_scene(scene, arm, setting.preset, planner_cfg, grasp_tol, sensor=sensor,
                               seed=derive_seed(setting.seed, i, 7), setting=setting.name)
        logger.info("%s: %d approached, %d grasped (%.2fs)", scene.scene_id, len(run.approached_leaves()),
                    len(run.grasped_leaves()), run.wall_time)
        runs.append(run)
    return runs


# ---------------------------------------------------------------- metrics

@dataclass
class LPBReport:
    setting: str
    n_batches: int
    total_approaches: int
    successful_approaches: int
    grasp_rate: float | None
    availability: dict[int, float]  # k -> % of batches with >= k approached leaves
    success: dict[int, float | None]  # k -> % of those with >= k grasped leaves

    def row(self) -> dict:
        out = {"setting": self.setting, "total_approaches": self.total_approaches, "grasp_rate": self.grasp_rate}
        for k in (1, 2, 3):
            out[f"lpb{k}_avail"] = self.availability[k]
        for k in (1, 2, 3):
            out[f"lpb{k}_success"] = self.success[k]
        return out


METRIC_COLUMNS = ("setting", "total_approaches", "grasp_rate", "lpb1_avail", "lpb2_avail", "lpb3_avail",
                  "lpb1_success", "lpb2_success", "lpb3_success")


def batch_counts(run: BatchRun) -> tuple[int, int]:
    """(approached leaves, successfully grasped leaves) of one batch."""
    return len(run.approached_leaves()), len(run.grasped_leaves())


def lpb_from_counts(counts, setting: str = "all", ks=(1, 2, 3), totals: tuple[int, int] | None = None) -> LPBReport:
    """Metrics from per-batch ``(approached leaves, grasped leaves)`` pairs.

    ``totals`` overrides the (approaches, successes) sums used for the grasp
    rate, for batches where a leaf was approached more than once.
    """
    counts = [(int(a), int(s)) for a, s in counts]
    if not counts:
        raise EmptyInput("no batches to summarise")
    total, good = totals if totals is not None else (sum(a for a, _ in counts), sum(s for _, s in counts))
    avail, succ = {}, {}
    for k in ks:
        group = [(a, s) for a, s in counts if a >= k]
        avail[k] = 100.0 * len(group) / len(counts)
        succ[k] = 100.0 * sum(1 for _, s in group if s >= k) / len(group) if group else None
    return LPBReport(setting, len(counts), total, good, 100.0 * good / total if total else None, avail, succ)


def lpb_metrics(runs: list[BatchRun], setting: str | None = None) -> LPBReport:
    if not runs:
        raise EmptyInput("no batch runs")
    label = setting or (runs[0].setting if len({r.setting for r in runs}) == 1 else "combined")
    totals = (sum(r.n_approaches for r in runs), sum(r.n_successes for r in runs))
    return lpb_from_counts([batch_counts(r) for r in runs], label, totals=totals)


def metrics_by_setting(runs: list[BatchRun]) -> list[LPBReport]:
    """One report per setting in first-seen order, plus a combined row when there are several."""
    order: list[str] = []
    for r in runs:
        if r.setting not in order:
            order.append(r.setting)
    reports = [lpb_metrics([r for r in runs if r.setting == s], s) for s in order]
    if len(order) > 1:
        reports.append(lpb_metrics(runs, "combined"))
    return reports
