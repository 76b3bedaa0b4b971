import numpy as np
import pytest

from cslam import manifold as mf
from cslam.manifold import Pose, Rotation


def random_pose(rng, dim, max_angle=0.9 * np.pi):
    if dim == 2:
        theta = rng.uniform(-max_angle, max_angle)
        return Pose(Rotation(2, theta), rng.uniform(-10, 10, size=2))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * rng.uniform(0, max_angle)
    return Pose(Rotation.exp_map(w), rng.uniform(-10, 10, size=3))


def integrate_twist_se2(w, v, steps=200_000):
    """Independent oracle: integrate xdot = R(theta) v, thetadot = w over [0,1] (RK4)."""
    h = 1.0 / steps
    x = np.zeros(2)
    th = 0.0

    def f(theta):
        c, s = np.cos(theta), np.sin(theta)
        return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])

    for i in range(steps):
        t0 = th
        k1 = f(t0)
        k2 = f(t0 + 0.5 * h * w)
        k3 = f(t0 + 0.5 * h * w)
        k4 = f(t0 + h * w)
        x += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        th += h * w
    return x, th


class TestCompose:
    def test_identity(self):
        rng = np.random.default_rng(0)
        for dim in (2, 3):
            p = random_pose(rng, dim)
            q = mf.compose(Pose.identity(dim), p)
            assert np.allclose(q.raw(), p.raw(), atol=1e-12)

    def test_inverse(self):
        rng = np.random.default_rng(1)
        for dim in (2, 3):
            p = random_pose(rng, dim)
            q = mf.compose(p, mf.inverse(p))
            assert q.rotation.angle_to(Rotation.identity(dim)) < 1e-9
            assert np.linalg.norm(q.translation) < 1e-9

    def test_se2_hand_oracle(self):
        # 2x2 rotation-matrix multiplication by hand:
        # R(pi/2) @ [1, 0] = [0, 1], so translation = (1,0) + (0,1) = (1,1).
        a = Pose.se2(1.0, 0.0, np.pi / 2)
        b = Pose.se2(1.0, 0.0, 0.0)
        c = mf.compose(a, b)
        assert np.allclose(c.translation, [1.0, 1.0], atol=1e-12)
        assert abs(c.rotation.data[0] - np.pi / 2) < 1e-12

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for dim in (2, 3):
            for _ in range(20):
                a, b, c = (random_pose(rng, dim) for _ in range(3))
                lhs = mf.compose(mf.compose(a, b), c)
                rhs = mf.compose(a, mf.compose(b, c))
                assert mf.local_distance(lhs, rhs) < 1e-9


class TestLogExp:
    def test_log_identity(self):
        for dim in (2, 3):
            assert np.allclose(mf.log_map(Pose.identity(dim)), 0.0, atol=1e-15)

    def test_round_trip_pose(self):
        rng = np.random.default_rng(3)
        for dim in (2, 3):
            for _ in range(50):
                p = random_pose(rng, dim, max_angle=0.9 * np.pi)
                q = mf.exp_map(mf.log_map(p), dim=dim)
                assert mf.local_distance(p, q) < 1e-9

    def test_round_trip_tangent(self):
        rng = np.random.default_rng(4)
        for dim in (2, 3):
            p = mf.tangent_dim(dim)
            rot_dims = 1 if dim == 2 else 3
            for _ in range(50):
                v = rng.uniform(-5, 5, size=p)
                w = v[:rot_dims]
                norm = np.linalg.norm(w)
                if norm > 0.9 * np.pi:
                    v[:rot_dims] = w * (0.9 * np.pi / norm) * rng.uniform(0, 1)
                u = mf.log_map(mf.exp_map(v, dim=dim))
                assert np.linalg.norm(u - v) < 1e-8

    def test_se2_exp_v_matrix_value(self):
        # exp([pi/2, pi/2, 0]) translation -> (1, 1); oracle: twist integration.
        p = mf.exp_map(np.array([np.pi / 2, np.pi / 2, 0.0]))
        assert np.allclose(p.translation, [1.0, 1.0], atol=1e-9)
        x_oracle, th_oracle = integrate_twist_se2(np.pi / 2, np.array([np.pi / 2, 0.0]))
        assert np.allclose(p.translation, x_oracle, atol=1e-8)
        assert abs(p.rotation.data[0] - th_oracle) < 1e-10

    def test_rotation_unit_norm_kept(self):
        rng = np.random.default_rng(5)
        r = Rotation(3, rng.normal(size=4))
        assert abs(np.linalg.norm(r.data) - 1.0) < 1e-9
        for _ in range(100):
            r = r.compose(Rotation.exp_map(rng.normal(size=3) * 0.1))
        assert abs(np.linalg.norm(r.data) - 1.0) < 1e-9

    def test_rotation_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            r = Rotation.exp_map(axis * rng.uniform(0, 0.99 * np.pi))
            r2 = Rotation.exp_map(r.log_map())
            assert r.angle_to(r2) < 1e-9

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            mf.exp_map(np.array([np.nan, 0.0, 0.0]))
        with pytest.raises(ValueError):
            mf.log_map(Pose(Rotation(2, 0.0), np.array([np.inf, 0.0])))


class TestSplitInterpolate:
    def test_equal_endpoints(self):
        rng = np.random.default_rng(7)
        for dim in (2, 3):
            a = random_pose(rng, dim)
            m = mf.split_interpolate(a, a, 0.5)
            assert mf.local_distance(a, m) < 1e-12

    def test_endpoint_cases(self):
        rng = np.random.default_rng(8)
        for dim in (2, 3):
            a, b = random_pose(rng, dim), random_pose(rng, dim)
            assert mf.local_distance(mf.split_interpolate(a, b, 0.0), a) < 1e-12
            assert mf.local_distance(mf.split_interpolate(a, b, 1.0), b) < 1e-12

    def test_se2_quarter_turn_midpoint(self):
        a = Pose.se2(0.0, 0.0, 0.0)
        b = Pose.se2(2.0, 0.0, np.pi / 2)
        m = mf.split_interpolate(a, b, 0.5)
        assert abs(m.rotation.data[0] - np.pi / 4) < 1e-12
        assert np.allclose(m.translation, [1.0, 0.0], atol=1e-12)

    def test_midpoint_symmetry(self):
        rng = np.random.default_rng(9)
        for dim in (2, 3):
            for _ in range(20):
                a, b = random_pose(rng, dim), random_pose(rng, dim)
                m1 = mf.split_interpolate(a, b, 0.5)
                m2 = mf.split_interpolate(b, a, 0.5)
                assert mf.local_distance(m1, m2) < 1e-9

    def test_antipodal_error(self):
        a = Pose.se2(0.0, 0.0, 0.0)
        b = Pose.se2(1.0, 0.0, np.pi)
        with pytest.raises(ValueError):
            mf.split_interpolate(a, b, 0.5)

    def test_fraction_bounds(self):
        a = Pose.identity(2)
        with pytest.raises(ValueError):
            mf.split_interpolate(a, a, 1.5)


class TestChordalVec:
    def test_identity(self):
        v = mf.chordal_vec(Pose.identity(2))
        assert np.allclose(v, [1, 0, 0, 1, 0, 0], atol=1e-15)

    def test_quarter_turn(self):
        # R(pi/2) = [[0, -1], [1, 0]]; column-major -> [0, 1, -1, 0].
        v = mf.chordal_vec(Pose.se2(2.0, 3.0, np.pi / 2))
        assert np.allclose(v, [0, 1, -1, 0, 2, 3], atol=1e-12)

    def test_se3_length(self):
        assert mf.chordal_vec(Pose.identity(3)).shape == (12,)

    def test_injective_on_test_set(self):
        rng = np.random.default_rng(10)
        for dim in (2, 3):
            poses = [random_pose(rng, dim) for _ in range(40)]
            for i in range(len(poses)):
                for j in range(i + 1, len(poses)):
                    if mf.local_distance(poses[i], poses[j]) > 1e-6:
                        dv = mf.chordal_vec(poses[i]) - mf.chordal_vec(poses[j])
                        assert np.linalg.norm(dv) > 1e-7
