import math

import numpy as np
import pytest

from cubemap_vo.calib import CubemapCamera, Face, FacePoint, normalize, project_points
from cubemap_vo.errors import (ConfigurationError, CrossFaceError, DegenerateError,
                               InsufficientDataError)
from cubemap_vo.lie import Se3Pose, random_rotation
from cubemap_vo.optim import (
    HUBER_DEFAULT,
    CubemapObservation,
    MetricKind,
    bundle_adjust,
    jacobian_point,
    jacobian_pose,
    metric_batch,
    optimize_pose,
    reprojection_rms,
    residual_metric,
    residual_ru,
)

from oracles import (JAC_POINT_FRONT, JAC_POINT_LEFT, JAC_POSE_FRONT, central_difference,
                     relative_error)

CAM = CubemapCamera(650)


def obs_at(face, u, v, point_id=0, pose_id=0):
    return CubemapObservation(point_id, pose_id, FacePoint(face, u, v))


def random_config(rng, face):
    """Pose, world point and exact observation with the point well inside ``face``."""
    pose = Se3Pose(random_rotation(rng, 0.6), rng.normal(size=3))
    uv = rng.uniform(40, 610, 2)
    c = (CAM.face_size - 1) / 2.0
    ray = CAM.rotation(face).T @ np.array([(uv[0] - c) / CAM.focal, (uv[1] - c) / CAM.focal, 1.0])
    P_body = ray * rng.uniform(2.0, 20.0)
    P_world = pose.inverse().act(P_body)
    obs = obs_at(face, *(uv + rng.normal(0, 2.0, 2)))
    return pose, P_world, obs


class TestResidualRu:
    def test_exact_projection(self):
        assert residual_ru(CAM, Se3Pose.identity(), [0, 0, 5], obs_at(Face.FRONT, 324.5, 324.5)).tolist() == [0, 0]

    def test_one_pixel_offset(self):
        r = residual_ru(CAM, Se3Pose.identity(), [0, 0, 5], obs_at(Face.FRONT, 325.5, 324.5))
        np.testing.assert_allclose(r, [1.0, 0.0], atol=1e-12)

    def test_cross_face(self):
        with pytest.raises(CrossFaceError):
            residual_ru(CAM, Se3Pose.identity(), [0, 0, 5], obs_at(Face.LEFT, 324.5, 324.5))

    def test_behind(self):
        with pytest.raises((DegenerateError, CrossFaceError)):
            residual_ru(CAM, Se3Pose.identity(), [0, 0, -5], obs_at(Face.FRONT, 324.5, 324.5))


class TestJacobians:
    def test_front_on_axis(self):
        o = obs_at(Face.FRONT, 324.5, 324.5)
        np.testing.assert_allclose(jacobian_point(CAM, Se3Pose.identity(), [0, 0, 5], o),
                                   JAC_POINT_FRONT, atol=1e-12)
        np.testing.assert_allclose(jacobian_pose(CAM, Se3Pose.identity(), [0, 0, 5], o),
                                   JAC_POSE_FRONT, atol=1e-12)

    def test_left_on_axis(self):
        o = obs_at(Face.LEFT, 324.5, 324.5)
        np.testing.assert_allclose(jacobian_point(CAM, Se3Pose.identity(), [-5, 0, 0], o),
                                   JAC_POINT_LEFT, atol=1e-12)

    @pytest.mark.parametrize("face", [Face.FRONT, Face.LEFT, Face.RIGHT, Face.UP, Face.DOWN])
    def test_finite_differences(self, face):
        rng = np.random.default_rng(int(face))
        for _ in range(40):
            pose, P, o = random_config(rng, face)
            J_num = central_difference(lambda xi: residual_ru(CAM, pose.retract(xi), P, o), np.zeros(6))
            assert relative_error(jacobian_pose(CAM, pose, P, o), J_num) < 1e-5
            J_num = central_difference(lambda X: residual_ru(CAM, pose, X, o), P)
            assert relative_error(jacobian_point(CAM, pose, P, o), J_num) < 1e-5


class TestBearingMetrics:
    def test_coincident(self):
        b = normalize(np.array([0.3, -0.2, 1.0]))
        for kind in ("r_a1", "r_a2", "r_t", "r_f"):
            assert np.allclose(residual_metric(kind, b, b), 0.0, atol=1e-15)

    def test_orthogonal(self):
        bp, bm = np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])
        assert residual_metric("r_a1", bp, bm)[0] == pytest.approx(math.pi / 2)
        assert residual_metric("r_a2", bp, bm)[0] == pytest.approx(1.0)
        assert np.linalg.norm(residual_metric("r_t", bp, bm)) == pytest.approx(1.0)
        assert np.linalg.norm(residual_metric("r_f", bp, bm)) == pytest.approx(math.sqrt(2))

    def test_small_angle_precision(self):
        bp = np.array([0.0, 0.0, 1.0])
        bm = normalize(np.array([1e-9, 0.0, 1.0]))
        assert metric_batch(MetricKind.RA1, bp[None], bm[None])[0, 0] == pytest.approx(1e-9, rel=1e-6)

    def test_parse(self):
        assert MetricKind.parse("u") is MetricKind.RU
        assert MetricKind.parse("r_t") is MetricKind.RT
        with pytest.raises(ValueError):
            MetricKind.parse("r_z")


def pose_problem(rng, n_points=50, outliers=0.0):
    truth = Se3Pose(random_rotation(rng, 0.3), rng.normal(size=3))
    dirs = normalize(rng.normal(size=(n_points * 3, 3)))
    body = dirs[dirs[:, 2] > -0.3][:n_points] * rng.uniform(3, 15, (n_points, 1))
    points = truth.inverse().act(body)
    faces, uv = project_points(CAM, body)
    n_out = int(round(outliers * n_points))
    uv[:n_out] += rng.choice([-1, 1], (n_out, 2)) * rng.uniform(20, 60, (n_out, 2))
    obs = [obs_at(Face(int(f)), *x, point_id=i) for i, (f, x) in enumerate(zip(faces, uv))]
    return truth, points, obs


def perturb(rng, pose, rot=0.05, trans=0.1):
    xi = np.concatenate([normalize(rng.normal(size=3)) * rot, normalize(rng.normal(size=3)) * trans])
    return pose.retract(xi)


class TestOptimizePose:
    def test_fixed_point(self):
        rng = np.random.default_rng(0)
        truth, pts, obs = pose_problem(rng)
        res = optimize_pose(CAM, truth, pts, obs)
        assert res.cost == pytest.approx(0.0, abs=1e-18)
        np.testing.assert_allclose(res.pose.matrix(), truth.matrix(), atol=1e-12)

    def test_convergence_over_seeds(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            truth, pts, obs = pose_problem(rng)
            res = optimize_pose(CAM, perturb(rng, truth), pts, obs)
            d = res.pose @ truth.inverse()
            assert np.linalg.norm(d.t) < 1e-8
            assert np.linalg.norm(d.R - np.eye(3)) < 1e-8
            assert res.converged

    @pytest.mark.parametrize("metric", ["r_t", "r_f", "r_a1", "r_a2"])
    def test_bearing_metrics_converge(self, metric):
        rng = np.random.default_rng(11)
        truth, pts, obs = pose_problem(rng)
        res = optimize_pose(CAM, perturb(rng, truth), pts, obs, metric=metric)
        d = res.pose @ truth.inverse()
        assert np.linalg.norm(d.t) < 1e-6 and np.linalg.norm(d.R - np.eye(3)) < 1e-6

    def test_huber_limits_outlier_damage(self):
        clean, robust = [], []
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            truth, pts, obs = pose_problem(rng, 100)
            noisy = [CubemapObservation(o.point_id, 0, FacePoint(o.fp.face, *(o.fp.uv + rng.normal(0, 1, 2))))
                     for o in obs]
            init = perturb(rng, truth)
            clean.append(np.linalg.norm((optimize_pose(CAM, init, pts, noisy).pose @ truth.inverse()).t))
            n_out = 20
            bad = [CubemapObservation(o.point_id, 0, FacePoint(o.fp.face, *np.clip(o.fp.uv + rng.choice([-1, 1], 2) * 40, 0, 649)))
                   if i < n_out else o for i, o in enumerate(noisy)]
            res = optimize_pose(CAM, init, pts, bad, huber=HUBER_DEFAULT)
            robust.append(np.linalg.norm((res.pose @ truth.inverse()).t))
        assert np.median(robust) <= 5 * np.median(clean)

    def test_insufficient(self):
        rng = np.random.default_rng(2)
        truth, pts, obs = pose_problem(rng)
        with pytest.raises(InsufficientDataError):
            optimize_pose(CAM, truth, pts, obs[:2])


def ba_problem(rng, n_poses=8, n_points=300):
    poses = [Se3Pose(random_rotation(rng, 0.1), np.array([-0.5 * i, 0.05 * i, 0.0]))
             for i in range(n_poses)]
    pts = np.column_stack([rng.uniform(-8, 8, n_points), rng.uniform(-4, 4, n_points),
                           rng.uniform(4, 14, n_points)])
    obs = []
    for j, T in enumerate(poses):
        faces, uv = project_points(CAM, T.act(pts))
        for i in np.flatnonzero(faces >= 0):
            obs.append(obs_at(Face(int(faces[i])), *uv[i], point_id=int(i), pose_id=j))
    return poses, pts, obs


class TestBundleAdjust:
    def test_converges_from_perturbation(self):
        rng = np.random.default_rng(3)
        poses, pts, obs = ba_problem(rng)
        start = [poses[0], poses[1]] + [perturb(rng, T, 0.02, 0.05) for T in poses[2:]]
        noisy_pts = pts + rng.normal(0, 0.01 * 10, pts.shape)
        res = bundle_adjust(CAM, start, noisy_pts, obs, fixed={0, 1})
        assert res.rms < 1e-6
        assert np.all(np.diff(res.cost_history) <= 0)
        assert res.initial_rms > 1.0

    def test_scale_anchor_gauge(self):
        rng = np.random.default_rng(4)
        poses, pts, obs = ba_problem(rng)
        start = [poses[0]] + [perturb(rng, T, 0.01, 0.02) for T in poses[1:]]
        res = bundle_adjust(CAM, start, pts, obs, fixed={0}, scale_anchor=3)
        assert res.rms < 1e-6
        assert np.linalg.norm(res.poses[3].center - res.poses[0].center) == pytest.approx(
            np.linalg.norm(start[3].center - start[0].center), rel=1e-6)

    def test_optimal_input_unchanged(self):
        rng = np.random.default_rng(5)
        poses, pts, obs = ba_problem(rng)
        res = bundle_adjust(CAM, poses, pts, obs, fixed={0, 1})
        assert len(res.cost_history) == 1
        assert res.rms == res.initial_rms
        assert res.rms == pytest.approx(reprojection_rms(CAM, poses, pts, obs))

    def test_gauge_required(self):
        rng = np.random.default_rng(6)
        poses, pts, obs = ba_problem(rng, 4, 50)
        with pytest.raises(ConfigurationError):
            bundle_adjust(CAM, poses, pts, obs, fixed=set())
        with pytest.raises(ConfigurationError):
            bundle_adjust(CAM, poses, pts, obs, fixed={0})

    def test_mapping_containers(self):
        rng = np.random.default_rng(7)
        poses, pts, obs = ba_problem(rng, 4, 80)
        res = bundle_adjust(CAM, dict(enumerate(poses)), {i: p for i, p in enumerate(pts)}, obs,
                            fixed={0, 1})
        assert isinstance(res.poses, dict) and isinstance(res.points, dict)
