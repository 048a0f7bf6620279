import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from cubemap_vo.lie import (Se3Pose, nearest_rotation, rotation_angle, se3_exp, skew, so3_exp,
                            so3_left_jacobian, so3_log)

vectors = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_so3_exp_matches_scipy(phi):
    np.testing.assert_allclose(so3_exp(phi), Rotation.from_rotvec(phi).as_matrix(), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_so3_log_inverts_exp(phi):
    if np.linalg.norm(phi) >= np.pi - 1e-6:
        return
    np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)


def test_log_near_pi():
    phi = np.array([0.0, np.pi, 0.0])
    np.testing.assert_allclose(so3_exp(so3_log(so3_exp(phi))), so3_exp(phi), atol=1e-9)


def test_small_angle_branch_orthonormal():
    R = so3_exp(np.array([1e-9, -2e-9, 3e-10]))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-15)


def test_se3_exp_translation_uses_left_jacobian():
    xi = np.array([0.3, -0.2, 0.5, 1.0, 2.0, -1.0])
    T = se3_exp(xi)
    np.testing.assert_allclose(T.R, so3_exp(xi[:3]), atol=1e-15)
    np.testing.assert_allclose(T.t, so3_left_jacobian(xi[:3]) @ xi[3:], atol=1e-15)


def test_left_increment_derivative():
    # d/d eps exp(eps) T p = [-(R p + t)^ | I]
    rng = np.random.default_rng(0)
    T = Se3Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    p = rng.normal(size=3)
    h = 1e-6
    J = np.zeros((3, 6))
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        J[:, i] = (T.retract(e).act(p) - T.retract(-e).act(p)) / (2 * h)
    q = T.act(p)
    np.testing.assert_allclose(J, np.hstack([-skew(q), np.eye(3)]), atol=1e-8)


def test_pose_algebra():
    rng = np.random.default_rng(1)
    A = Se3Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    B = Se3Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    np.testing.assert_allclose((A @ B).matrix(), A.matrix() @ B.matrix(), atol=1e-12)
    np.testing.assert_allclose((A @ A.inverse()).matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(A.center, -A.R.T @ A.t, atol=1e-15)
    assert A.is_valid()


def test_nearest_rotation_repairs_drift():
    R = so3_exp(np.array([0.2, 0.1, -0.4]))
    noisy = R + 1e-6 * np.random.default_rng(2).normal(size=(3, 3))
    fixed = nearest_rotation(noisy)
    np.testing.assert_allclose(fixed.T @ fixed, np.eye(3), atol=1e-14)
    assert np.linalg.det(fixed) > 0
    assert rotation_angle(fixed.T @ R) < 1e-5
