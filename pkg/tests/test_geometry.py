import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation as SciRot

from splatloc.errors import BehindCameraError, InvalidArgumentError
from splatloc.geometry import (
    CameraPose,
    Intrinsics,
    Rotation,
    apply_rotation_update,
    back_project,
    hat,
    pixel_ray_direction,
    project,
    slerp,
    so3_exp,
    so3_exp_matrix,
    so3_log,
)
from splatloc.initializer import propagate_rotation


def series_expm(A, terms=30):
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def random_pose(rng):
    return CameraPose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 2.0)


def test_exp_identity_and_quarter_turn():
    assert np.allclose(so3_exp(np.zeros(3)).matrix(), np.eye(3), atol=0)
    R = so3_exp([0.0, 0.0, math.pi / 2])
    assert np.allclose(R.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_exp_matches_series_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        phi = rng.normal(size=3)
        phi *= 0.3 / np.linalg.norm(phi)
        oracle = series_expm(hat(phi))
        assert np.abs(so3_exp(phi).matrix() - oracle).max() < 1e-12
        assert np.abs(so3_exp_matrix(phi) - oracle).max() < 1e-12


def test_exp_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        so3_exp([np.nan, 0.0, 0.0])
    with pytest.raises(ValueError):
        so3_exp([1.0, 2.0])


def test_log_examples():
    assert np.array_equal(so3_log(Rotation.identity()), np.zeros(3))
    phi = np.array([0.1, -0.2, 0.05])
    assert np.abs(so3_log(so3_exp(phi)) - phi).max() < 1e-9


def test_log_near_pi_against_quaternion_angle():
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    angle = math.pi - 1e-7
    m = SciRot.from_rotvec(axis * angle).as_matrix()     # trace = -1 + O(eps^2)
    r = Rotation.from_matrix(m)
    q = SciRot.from_matrix(m).as_quat()
    oracle = 2.0 * math.atan2(np.linalg.norm(q[:3]), abs(q[3]))
    assert abs(np.linalg.norm(so3_log(r)) - oracle) < 1e-9
    assert abs(abs(so3_log(r) @ axis) - oracle) < 1e-7


def test_exp_log_round_trip_1e4():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    phis = d * rng.uniform(1e-6, math.pi - 1e-3, size=(10_000, 1))
    err = max(np.abs(so3_log(so3_exp(p)) - p).max() for p in phis)
    assert err < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_exp_log_round_trip_property(v):
    phi = np.array(v)
    if not 0.0 < np.linalg.norm(phi) < math.pi - 1e-3:
        return
    assert np.abs(so3_log(so3_exp(phi)) - phi).max() < 1e-9


def test_composition_matches_matrices_and_stays_unit():
    rng = np.random.default_rng(2)
    a, b = so3_exp(rng.normal(size=3)), so3_exp(rng.normal(size=3))
    assert np.abs((a @ b).matrix() - a.matrix() @ b.matrix()).max() < 1e-14
    r = Rotation.identity()
    steps = [so3_exp(p) for p in rng.normal(scale=0.5, size=(1000, 3))]
    for i in range(1_000_000):
        r = steps[i % 1000] @ r
    assert abs(r.norm - 1.0) < 1e-6


def test_quaternion_canonical_sign():
    r = Rotation(-0.5, 0.5, 0.5, 0.5)
    assert r.w >= 0 and np.allclose(r.quat, [0.5, -0.5, -0.5, -0.5])
    with pytest.raises(InvalidArgumentError):
        Rotation(0.0, 0.0, 0.0, 0.0)


def test_from_matrix_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(200):
        m = SciRot.from_rotvec(rng.normal(size=3)).as_matrix()
        assert np.abs(Rotation.from_matrix(m).matrix() - m).max() < 1e-12


def test_slerp_midpoint():
    a = so3_exp([0.0, 0.0, 0.2])
    b = so3_exp([0.0, 0.0, 0.6])
    assert np.abs(so3_log(slerp(a, b, 0.5)) - [0.0, 0.0, 0.4]).max() < 1e-12


def test_rotation_update_examples():
    rng = np.random.default_rng(4)
    T = random_pose(rng)
    same = apply_rotation_update(T, np.zeros(3))
    assert np.allclose(same.rotation.matrix(), T.rotation.matrix(), atol=1e-15)
    axis = np.array([0.3, -0.4, 0.5]) / np.linalg.norm([0.3, -0.4, 0.5])
    two = apply_rotation_update(apply_rotation_update(T, 0.1 * axis), 0.25 * axis)
    one = apply_rotation_update(T, 0.35 * axis)
    assert np.abs(two.rotation.matrix() - one.rotation.matrix()).max() < 1e-9


def test_rotation_update_left_convention_matrix_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        T = random_pose(rng)
        phi = rng.normal(scale=0.3, size=3)
        out = apply_rotation_update(T, phi)
        H = np.eye(4)
        H[:3, :3] = expm(hat(phi))
        oracle = H @ T.matrix()
        assert np.abs(out.rotation.matrix() - oracle[:3, :3]).max() < 1e-12
        assert np.array_equal(out.translation, T.translation)


def test_propagated_rotation_matrix_oracle():
    # query rotation from a relative rotation and the reference: dR @ R_ref
    rng = np.random.default_rng(6)
    for _ in range(100):
        d, r_ref = so3_exp(rng.normal(size=3)), so3_exp(rng.normal(size=3))
        oracle = expm(hat(so3_log(d))) @ expm(hat(so3_log(r_ref)))
        assert np.abs(propagate_rotation(d, r_ref).matrix() - oracle).max() < 1e-12


def test_pose_center_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(100):
        T = random_pose(rng)
        again = CameraPose.from_center(T.rotation, T.center)
        assert np.abs(again.translation - T.translation).max() < 1e-12
        assert np.allclose(T.transform(T.center), 0.0, atol=1e-12)


def test_pose_json_round_trip():
    T = random_pose(np.random.default_rng(8))
    back = CameraPose.from_json(T.to_json())
    assert np.array_equal(back.translation, T.translation)
    assert np.allclose(back.rotation.quat, T.rotation.quat, atol=1e-16)


def test_project_examples():
    K = Intrinsics(100.0, 100.0, 0.0, 0.0, 200, 200)
    px, d = project([1.0, 0.0, 2.0], CameraPose(), K)
    assert np.allclose(px, [50.0, 0.0]) and d == 2.0
    K2 = Intrinsics.from_fov(64, 48, 60.0)
    px, d = project([0.0, 0.0, 1.0], CameraPose(), K2)
    assert np.allclose(px, [K2.cx, K2.cy]) and d == 1.0
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, -1.0], CameraPose(), K2)
    with pytest.raises(ValueError):
        project([0.0, 0.0, 0.0], CameraPose(), K2)


def test_back_project_examples():
    K = Intrinsics.from_fov(64, 48, 60.0)
    assert np.allclose(back_project([K.cx, K.cy], 1.0, CameraPose(), K), [0.0, 0.0, 1.0])
    T = CameraPose.from_center(Rotation.identity(), [0.0, 0.0, -5.0])
    assert np.allclose(back_project([K.cx, K.cy], 5.0, T, K), 0.0, atol=1e-15)
    with pytest.raises(InvalidArgumentError):
        back_project([K.cx, K.cy], 0.0, T, K)


def test_project_back_project_round_trip_1e4():
    rng = np.random.default_rng(9)
    K = Intrinsics.from_fov(128, 96, 70.0)
    worst = 0.0
    for _ in range(10_000):
        T = random_pose(rng)
        xc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 10.0)])
        X = T.rotation.matrix().T @ (xc - T.translation)
        px, d = project(X, T, K)
        worst = max(worst, np.abs(back_project(px, d, T, K) - X).max())
    assert worst < 1e-9


def test_pixel_ray_direction():
    K = Intrinsics.from_fov(64, 48, 60.0)
    assert np.allclose(pixel_ray_direction([K.cx, K.cy], Rotation.identity(), K), [0, 0, 1])
    rng = np.random.default_rng(10)
    for _ in range(100):
        R = so3_exp(rng.normal(size=3))
        pix = rng.uniform([0, 0], [63, 47])
        v = pixel_ray_direction(pix, R, K)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12
        P = rng.normal(size=3)
        T = CameraPose.from_center(R, P - 3.0 * v)
        assert np.abs(project(P, T, K)[0] - pix).max() < 1e-6


def test_intrinsics_scaling_and_json():
    K = Intrinsics.from_fov(128, 96, 60.0)
    Ks = K.scaled(0.25)
    assert (Ks.width, Ks.height) == (32, 24)
    assert np.allclose(Ks.center_pixel, [Ks.cx, Ks.cy])
    assert Intrinsics.from_json(K.to_json()) == K
    with pytest.raises(InvalidArgumentError):
        Intrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
