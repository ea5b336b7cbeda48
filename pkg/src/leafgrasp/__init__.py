"""Leaf pose estimation, grasp planning and batch evaluation in simulation."""
from .geometry import CameraIntrinsics, Pose, Transform
from .kinematics import ArmModel, default_arm, fk, solve_ik
from .perception import PoseSet, perceive
from .planning import CollisionScene, PlannerConfig, plan_rrtc
from .scenegen import Scene, gen_batch, render
from .workflow import (BatchRun, ExperimentSetting, lpb_metrics, metrics_by_setting, process_scene, run_batch,
                       run_setting)

__version__ = "0.1.0"

__all__ = [
    "ArmModel", "BatchRun", "CameraIntrinsics", "CollisionScene", "ExperimentSetting", "PlannerConfig", "Pose",
    "PoseSet", "Scene", "Transform", "default_arm", "fk", "gen_batch", "lpb_metrics", "metrics_by_setting",
    "perceive", "plan_rrtc", "process_scene", "render", "run_batch", "run_setting", "solve_ik",
]
