import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from leafgrasp.errors import GoalInCollision, LengthMismatch, PlanningTimeout, StartInCollision
from leafgrasp.geometry import Pose, Transform, matrix_to_quat
from leafgrasp.kinematics import default_arm, fk
from leafgrasp.planning import (
    Box,
    CollisionScene,
    Path,
    PlannerConfig,
    collides,
    collides_batch,
    interpolate,
    leaf_box,
    path_is_valid,
    plan_rrtc,
    point_box_distance,
    segment_box_distance,
    segment_segment_distance,
    shortcut,
)

from strategies import rotations, seeds, transforms

ARM = default_arm()
HOME = np.array(ARM.home)
EMPTY = CollisionScene()
IDENTITY_Q = np.array([1.0, 0, 0, 0])
small = st.floats(-1.0, 1.0, allow_nan=False)
point = st.tuples(small, small, small).map(np.array)


def sampled_segment_distance(p1, q1, p2, q2, n=400):
    s = np.linspace(0, 1, n)[:, None]
    a = p1 + s * (q1 - p1)
    b = p2 + s * (q2 - p2)
    return np.min(np.linalg.norm(a[:, None] - b[None], axis=-1))


def random_free_q(rng, scene):
    while True:
        q = rng.uniform(ARM.lower, ARM.upper)
        if not collides(ARM, q, scene):
            return q


def clutter(seed, n=6):
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n):
        c = np.array([rng.uniform(0.25, 0.7), rng.uniform(-0.4, 0.4), rng.uniform(0.1, 0.8)])
        R = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        R *= np.sign(np.linalg.det(R))
        boxes.append(Box(Pose(c, matrix_to_quat(R)), rng.uniform(0.02, 0.08, 3)))
    return CollisionScene(tuple(boxes))


# ---- primitives

@given(point, point, point, point)
def test_segment_distance_vs_sampling(p1, q1, p2, q2):
    d = float(segment_segment_distance(p1, q1, p2, q2))
    sampled = sampled_segment_distance(p1, q1, p2, q2)
    assert d <= sampled + 1e-9
    # sampling step bounds how far above the true minimum the grid can land
    step = (np.linalg.norm(q1 - p1) + np.linalg.norm(q2 - p2)) / 399
    assert sampled - d <= step + 1e-9


def test_segment_distance_near_parallel_shared_endpoint():
    d = segment_segment_distance([0, 0, 1.192092896e-07], [0, 1, 0], [0, 0, 0], [0, 1, 0])
    assert d == 0.0


@given(point, point, point, point)
def test_segment_distance_symmetric(p1, q1, p2, q2):
    a = segment_segment_distance(p1, q1, p2, q2)
    b = segment_segment_distance(p2, q2, p1, q1)
    assert abs(a - b) < 1e-9


def test_segment_distance_degenerate():
    assert math.isclose(segment_segment_distance([0, 0, 0], [0, 0, 0], [1, -1, 0], [1, 1, 0]), 1.0)
    assert math.isclose(segment_segment_distance([0, 0, 0], [0, 0, 0], [0, 3, 4], [0, 3, 4]), 5.0)
    assert math.isclose(segment_segment_distance([0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]), 1.0)


@given(point, point, rotations(), st.tuples(*[st.floats(0.01, 0.5)] * 3).map(np.array))
def test_segment_box_distance_vs_sampling(p, q, R, half):
    c = np.array([0.1, -0.2, 0.05])
    d = float(segment_box_distance(p, q, c, R, half))
    s = np.linspace(0, 1, 2001)[:, None]
    pts = (p + s * (q - p) - c) @ R
    sampled = float(point_box_distance(pts, half).min())
    assert d <= sampled + 1e-9
    assert sampled - d <= np.linalg.norm(q - p) / 2000 + 1e-9


def test_segment_through_box_is_zero():
    assert segment_box_distance([-1, 0, 0], [1, 0, 0], np.zeros(3), np.eye(3), [0.1, 0.1, 0.1]) == 0.0


def test_separated_box_by_axis():
    # separating axis x: box spans x in [0.9, 1.1], segments stay at x <= 0.5
    box = ([1.0, 0, 0], np.eye(3), [0.1, 0.5, 0.5])
    assert float(segment_box_distance([0, -1, 0], [0.5, 1, 0], *box)) >= 0.4
    assert math.isclose(float(segment_box_distance([0.5, -1, 0], [0.5, 1, 0], *box)), 0.4, abs_tol=1e-12)


# ---- collision queries

def test_home_is_free():
    assert not collides(ARM, HOME, EMPTY)


def test_box_around_end_effector():
    ee = fk(ARM, HOME).position
    scene = CollisionScene((Box(Pose(ee, IDENTITY_Q), np.full(3, 0.1)),))
    assert collides(ARM, HOME, scene)


def test_far_box_is_free():
    far = CollisionScene((Box(Pose(np.array([3.0, 0, 0]), IDENTITY_Q), np.full(3, 0.5)),))
    assert not collides(ARM, HOME, far)


def test_allowed_target_is_ignored():
    ee = fk(ARM, HOME)
    scene = CollisionScene((leaf_box(ee, 0.08, 0.04, leaf_id=3),))
    assert collides(ARM, HOME, scene)
    assert not collides(ARM, HOME, scene.with_target(3))
    assert collides(ARM, HOME, scene.with_target(4))


def test_collides_length_mismatch():
    with pytest.raises(LengthMismatch):
        collides(ARM, [0.0] * 5, EMPTY)


def test_batch_matches_single():
    scene = clutter(0)
    rng = np.random.default_rng(1)
    Q = rng.uniform(ARM.lower, ARM.upper, (50, 6))
    assert np.array_equal(collides_batch(ARM, Q, scene), [collides(ARM, q, scene) for q in Q])


@given(transforms(), seeds)
def test_collision_rigid_invariance(T, seed):
    T = Transform(T.rotation, T.translation * 0.2)
    scene = clutter(seed)
    moved_arm = dataclasses.replace(ARM, base_pose=T)
    rng = np.random.default_rng(seed)
    Q = rng.uniform(ARM.lower, ARM.upper, (20, 6))
    a = collides_batch(ARM, Q, scene)
    b = collides_batch(moved_arm, Q, scene.transformed(T))
    assert np.array_equal(a, b)


def test_scene_json_round_trip():
    scene = clutter(3).with_target(2)
    back = CollisionScene.from_json(scene.to_json())
    assert back.allowed_target == 2 and len(back.obstacles) == len(scene.obstacles)
    Q = np.random.default_rng(0).uniform(ARM.lower, ARM.upper, (20, 6))
    assert np.array_equal(collides_batch(ARM, Q, back), collides_batch(ARM, Q, scene))


# ---- interpolation and paths

@given(seeds, st.floats(0.01, 0.5))
def test_interpolate_step_bound(seed, res):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-3, 3, 6), rng.uniform(-3, 3, 6)
    pts = interpolate(a, b, res)
    steps = np.abs(np.diff(np.vstack([a, pts]), axis=0))
    assert steps.max() <= res + 1e-12
    assert np.allclose(pts[-1], b)


def test_planner_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(step_size=0.0)
    with pytest.raises(ValueError):
        PlannerConfig(goal_bias=1.5)
    assert PlannerConfig(step_size=0.2).check_resolution == pytest.approx(0.05)
    cfg = PlannerConfig(step_size=0.2, goal_bias=0.1, rng_seed=4)
    assert PlannerConfig.from_json(cfg.to_json()) == cfg


# ---- planner

def test_same_start_goal():
    p = plan_rrtc(ARM, HOME, HOME, EMPTY)
    assert len(p) == 1 and np.array_equal(p.waypoints[0], HOME)


def test_goal_in_collision():
    goal = HOME + 0.3
    ee = fk(ARM, goal).position
    scene = CollisionScene((Box(Pose(ee, IDENTITY_Q), np.full(3, 0.05)),))
    with pytest.raises(GoalInCollision):
        plan_rrtc(ARM, HOME, goal, scene)
    with pytest.raises(StartInCollision):
        plan_rrtc(ARM, goal, HOME, scene)


def test_timeout():
    rng = np.random.default_rng(0)
    scene = clutter(2, n=8)
    for _ in range(50):
        a, b = random_free_q(rng, scene), random_free_q(rng, scene)
        if collides_batch(ARM, interpolate(a, b, 0.025), scene).any():
            break
    with pytest.raises(PlanningTimeout):
        plan_rrtc(ARM, a, b, scene, PlannerConfig(max_iterations=1))


@pytest.mark.parametrize("seed", range(6))
def test_paths_valid_and_exact_endpoints(seed):
    scene = clutter(seed)
    rng = np.random.default_rng(seed)
    a, b = random_free_q(rng, scene), random_free_q(rng, scene)
    path = plan_rrtc(ARM, a, b, scene, PlannerConfig(rng_seed=seed))
    assert np.array_equal(path.waypoints[0], a) and np.array_equal(path.waypoints[-1], b)
    dense = path.densify()
    assert np.abs(np.diff(dense, axis=0)).max() <= path.resolution + 1e-12
    assert not any(collides(ARM, q, scene) for q in dense)
    short = shortcut(path, scene, ARM, 100, seed)
    assert path_is_valid(ARM, short, scene)
    assert short.arc_length() <= path.arc_length() + 1e-12
    assert np.array_equal(short.waypoints[0], a) and np.array_equal(short.waypoints[-1], b)


def test_planner_deterministic():
    scene = clutter(4)
    rng = np.random.default_rng(4)
    a, b = random_free_q(rng, scene), random_free_q(rng, scene)
    p1 = plan_rrtc(ARM, a, b, scene, PlannerConfig(rng_seed=9))
    p2 = plan_rrtc(ARM, a, b, scene, PlannerConfig(rng_seed=9))
    assert np.array_equal(p1.waypoints, p2.waypoints)


def test_shortcut_zero_attempts_and_straight_line():
    a, b = HOME, HOME + 0.2
    mids = np.linspace(a, b, 7)
    bent = mids.copy()
    bent[1:-1] += 0.01 * np.sin(np.arange(1, 6))[:, None]
    path = Path(bent, 0.025)
    assert np.array_equal(shortcut(path, EMPTY, ARM, attempts=0).waypoints, bent)
    out = shortcut(path, EMPTY, ARM, attempts=200, rng_seed=1)
    assert len(out) == 2
