import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cubemap_vo.errors import InsufficientDataError, NumericError, ParseError, ValidationError
from cubemap_vo.evaluation import (
    Sim3Transform,
    Trajectory,
    align_sim3,
    associate,
    ate_rmse,
    parse_trajectory,
    read_trajectory,
    umeyama,
    write_trajectory,
)
from cubemap_vo.lie import Se3Pose, random_rotation


def random_trajectory(rng, n=100):
    poses = [Se3Pose(random_rotation(rng), rng.normal(0, 5, 3)) for _ in range(n)]
    return Trajectory(np.arange(n) * 0.1, poses)


def random_sim3(rng):
    return Sim3Transform(float(np.exp(rng.uniform(-1.5, 1.5))), random_rotation(rng), rng.normal(0, 10, 3))


class TestAlignment:
    def test_identity(self):
        traj = random_trajectory(np.random.default_rng(0))
        sim = align_sim3(traj, traj)
        assert sim.s == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(sim.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(sim.t, 0.0, atol=1e-12)

    def test_pure_scale(self):
        rng = np.random.default_rng(1)
        gt = random_trajectory(rng)
        est = gt.transformed(Sim3Transform(0.5, np.eye(3), np.zeros(3)))
        sim = align_sim3(est, gt)
        assert sim.s == pytest.approx(2.0, rel=1e-12)
        np.testing.assert_allclose(sim.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(sim.t, 0.0, atol=1e-10)

    @pytest.mark.parametrize("seed", range(20))
    def test_round_trip_composes_to_identity(self, seed):
        rng = np.random.default_rng(seed)
        gt = random_trajectory(rng)
        applied = random_sim3(rng)
        recovered = align_sim3(gt.transformed(applied), gt)
        np.testing.assert_allclose((recovered @ applied).matrix(), np.eye(4), atol=1e-9)

    def test_too_few_pairs(self):
        traj = random_trajectory(np.random.default_rng(2), 2)
        with pytest.raises(InsufficientDataError):
            align_sim3(traj, traj)

    def test_collinear_is_rank_error_but_ate_defined(self):
        poses = [Se3Pose(np.eye(3), np.array([float(i), 0.0, 0.0])) for i in range(10)]
        traj = Trajectory(np.arange(10.0), poses)
        with pytest.raises(NumericError):
            align_sim3(traj, traj)
        assert ate_rmse(traj, traj) < 1e-12
        shifted = traj.transformed(Sim3Transform(3.0, random_rotation(np.random.default_rng(3)), np.ones(3)))
        assert ate_rmse(shifted, traj) < 1e-12

    def test_zero_variance(self):
        with pytest.raises(NumericError):
            umeyama(np.zeros((5, 3)), np.ones((5, 3)))


class TestAte:
    def test_self_is_zero(self):
        traj = random_trajectory(np.random.default_rng(4))
        assert ate_rmse(traj, traj) < 1e-12

    def test_known_offset(self):
        rng = np.random.default_rng(5)
        gt = random_trajectory(rng, 200)
        noise = rng.normal(0, 0.01, (200, 3))
        est = Trajectory(gt.timestamps, [Se3Pose(p.R, p.t + e) for p, e in zip(gt.poses, noise)])
        assert ate_rmse(est, gt) == pytest.approx(np.sqrt(np.mean(np.sum(noise**2, 1))), rel=0.05)


class TestAssociation:
    def test_exact_stamps_symmetric(self):
        a = np.arange(10) * 0.1
        b = np.arange(3, 15) * 0.1
        ab = associate(a, b)
        ba = [(j, i) for i, j in associate(b, a)]
        assert sorted(ab) == sorted(ba)
        assert len(ab) == 7

    def test_window(self):
        assert associate([0.0, 1.0], [0.015, 1.5]) == [(0, 0)]

    def test_each_stamp_used_once(self):
        pairs = associate([0.0, 0.01], [0.005])
        assert pairs == [(0, 0)] or pairs == [(1, 0)]
        assert len(pairs) == 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=30, unique=True))
    def test_symmetry_property(self, stamps):
        a = np.array(sorted(stamps))
        assert sorted(associate(a, a)) == [(i, i) for i in range(len(a))]


class TestTum:
    def test_identity_line(self):
        traj = parse_trajectory("0.0 0 0 0 0 0 0 1")
        assert traj.timestamps.tolist() == [0.0]
        np.testing.assert_allclose(traj.poses[0].matrix(), np.eye(4))

    def test_non_increasing_stamps(self):
        with pytest.raises(ValidationError):
            parse_trajectory("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")

    def test_malformed_line_number(self):
        with pytest.raises(ParseError, match="line 3"):
            parse_trajectory("# header\n0.0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 1\n")

    def test_unnormalized_quaternion(self):
        with pytest.raises(ParseError):
            parse_trajectory("0.0 0 0 0 0 0 0 1.1\n")
        traj = parse_trajectory("0.0 0 0 0 0 0 0 1.0005\n")
        assert traj.poses[0].is_valid()

    def test_round_trip(self, tmp_path):
        traj = random_trajectory(np.random.default_rng(6), 50)
        path = tmp_path / "t.txt"
        write_trajectory(path, traj)
        back = read_trajectory(path)
        np.testing.assert_array_equal(back.timestamps, traj.timestamps)
        for a, b in zip(back.poses, traj.poses):
            np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-9)
