import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selmvo.errors import EmptyTrajectory, NonPositiveDepth
from selmvo.geometry import (
    Intrinsics, Pose, backproject, compose, inverse, ned_to_camera, pose_distance,
    project, rebase_trajectory,
)

from helpers import hom, random_pose, rot_z

K = Intrinsics(100.0, 110.0, 320.0, 240.0, 640, 480)


def test_compose_identity():
    p = random_pose(np.random.default_rng(0))
    r = compose(Pose.identity(), p)
    np.testing.assert_allclose(r.matrix(), p.matrix(), atol=1e-12)


def test_compose_rz90_twice_matches_matrix_product():
    a = Pose.from_rt(rot_z(90), [1.0, 0.0, 0.0])
    oracle = hom(rot_z(90), [1, 0, 0]) @ hom(rot_z(90), [1, 0, 0])
    r = compose(a, a)
    np.testing.assert_allclose(r.matrix(), oracle, atol=1e-12)
    np.testing.assert_allclose(r.translation, [1.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(r.R, rot_z(180), atol=1e-12)


def test_inverse_cases():
    assert pose_distance(inverse(Pose.identity()), Pose.identity()) == (0.0, 0.0)
    p = Pose(translation=[1.0, 2.0, 3.0])
    np.testing.assert_allclose(inverse(p).translation, [-1, -2, -3])


def test_inverse_random_against_matrix_inverse():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = random_pose(rng)
        np.testing.assert_allclose(inverse(p).matrix(), np.linalg.inv(p.matrix()), atol=1e-12)
        ang, dist = pose_distance(compose(p, inverse(p)), Pose.identity())
        assert ang < 1e-9 and dist < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compose_associative_and_orthonormal(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    lhs = compose(compose(a, b), c)
    rhs = compose(a, compose(b, c))
    ang, dist = pose_distance(lhs, rhs)
    assert ang < 1e-9 and dist < 1e-9
    R = lhs.R
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert abs(np.linalg.norm(lhs.rotation) - 1) < 1e-9


def test_project_closed_form():
    np.testing.assert_allclose(project([0, 0, 1], K), [K.cx, K.cy])
    k = Intrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)
    assert project([1.0, 0.0, 2.0], k)[0] == pytest.approx(370.0)


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_project_rejects_non_positive_depth(z):
    with pytest.raises(NonPositiveDepth):
        project([0.1, 0.2, z], K)


def test_backproject_center():
    np.testing.assert_allclose(backproject([K.cx, K.cy], 2.0, K), [0, 0, 2.0])
    with pytest.raises(NonPositiveDepth):
        backproject([1.0, 1.0], 0.0, K)


def test_backproject_grid_against_homogeneous_oracle():
    us, vs = np.meshgrid(np.arange(0, 640, 37.5), np.arange(0, 480, 29.25))
    px = np.stack([us.ravel(), vs.ravel()], axis=1)
    pts = backproject(px, 1.5, K)
    Kinv = np.linalg.inv(K.K)
    oracle = (Kinv @ np.vstack([px.T, np.ones(len(px))])).T * 1.5
    np.testing.assert_allclose(pts, oracle, atol=1e-12)
    np.testing.assert_allclose(project(pts, K), px, atol=1e-10)


def test_ned_identity_and_forward():
    np.testing.assert_allclose(ned_to_camera(Pose.identity()).matrix(), np.eye(4), atol=1e-15)
    p = ned_to_camera(Pose(translation=[1.0, 0.0, 0.0]))
    np.testing.assert_allclose(p.translation, [0.0, 0.0, 1.0])
    # east -> camera right (+x), down -> camera down (+y)
    np.testing.assert_allclose(ned_to_camera(Pose(translation=[0, 1.0, 0])).translation, [1, 0, 0])
    np.testing.assert_allclose(ned_to_camera(Pose(translation=[0, 0, 1.0])).translation, [0, 1, 0])


def test_ned_matches_permutation_matrix_oracle():
    P = np.zeros((4, 4))
    P[0, 1] = P[1, 2] = P[2, 0] = P[3, 3] = 1.0
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = random_pose(rng)
        np.testing.assert_allclose(ned_to_camera(p).matrix(), P @ p.matrix() @ P.T, atol=1e-12)


def test_ned_isometry():
    rng = np.random.default_rng(7)
    traj = [random_pose(rng, 30.0) for _ in range(40)]
    a = np.array([p.translation for p in traj])
    b = np.array([ned_to_camera(p).translation for p in traj])
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    np.testing.assert_allclose(db, da, atol=1e-12)


def test_rebase_hospital_start():
    first = Pose(translation=[7.0, -30.0, 3.0])
    out = rebase_trajectory([first, Pose(translation=[8.0, -30.0, 3.0])])
    np.testing.assert_array_equal(out[0].translation, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(out[1].translation, [1.0, 0.0, 0.0])


def test_rebase_idempotent_and_left_invariant():
    rng = np.random.default_rng(11)
    traj = [random_pose(rng) for _ in range(10)]
    once = rebase_trajectory(traj)
    twice = rebase_trajectory(once)
    for a, b in zip(once, twice):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)
    for i in range(9):
        r0 = compose(inverse(traj[i]), traj[i + 1])
        r1 = compose(inverse(once[i]), once[i + 1])
        np.testing.assert_allclose(r0.matrix(), r1.matrix(), atol=1e-12)


def test_rebase_empty():
    with pytest.raises(EmptyTrajectory):
        rebase_trajectory([])


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 11.0, 1.0, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 1.0, 1.0, 10, 10, depth_factor=0)
