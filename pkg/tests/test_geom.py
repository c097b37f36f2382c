import math

import numpy as np
import pytest

from aeroloc import geom
from aeroloc.geom import (
    BehindCamera,
    GimbalLock,
    Intrinsics,
    InvalidDepth,
    Pose,
    RotationAngles,
    euler_from_rotation,
    gravity_direction,
    project,
    rotation_from_angles,
    unproject,
    wrap_angle_deg,
)

from conftest import random_rotation


K = Intrinsics(fx=100.0, fy=100.0, cx=320.0, cy=240.0, width=640, height=480)


class TestEulerExtraction:
    def test_identity(self):
        a = euler_from_rotation(np.eye(3))
        assert (a.roll, a.yaw, a.pitch) == (0.0, 0.0, 0.0)

    def test_z_rotation_90(self):
        # +90 deg about world z, matrix written out by hand.
        R = np.array([[0.0, -1.0, 0.0],
                      [1.0, 0.0, 0.0],
                      [0.0, 0.0, 1.0]])
        a = euler_from_rotation(R)
        assert a.roll == pytest.approx(0.0, abs=1e-12)
        assert a.yaw == pytest.approx(90.0, abs=1e-12)
        assert a.pitch == pytest.approx(0.0, abs=1e-12)

    def test_gimbal_lock_guard(self):
        # Ry(-90) puts R31 at exactly +1.
        R = geom.rot_y(-90.0)
        assert abs(R[2, 0] - 1.0) < 1e-12
        with pytest.raises(GimbalLock):
            euler_from_rotation(R)

    def test_round_trip_many(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            a = RotationAngles(roll=rng.uniform(-85, 85),
                               yaw=rng.uniform(-179, 179),
                               pitch=rng.uniform(-179, 179))
            b = euler_from_rotation(rotation_from_angles(a))
            assert abs(b.roll - a.roll) < 1e-6
            assert abs(b.yaw - a.yaw) < 1e-6
            assert abs(b.pitch - a.pitch) < 1e-6

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(12)
        for _ in range(300):
            R = random_rotation(rng)
            if abs(R[2, 0]) >= 1 - 1e-6:
                continue
            R2 = rotation_from_angles(euler_from_rotation(R))
            assert np.max(np.abs(R2 - R)) < 1e-6


class TestRotationFromAngles:
    def test_zero_is_identity(self):
        R = rotation_from_angles(RotationAngles(0.0, 0.0, 0.0))
        assert np.allclose(R, np.eye(3), atol=1e-15)

    def test_named_round_trip(self):
        a = RotationAngles(10.0, 35.0, -20.0)
        b = euler_from_rotation(rotation_from_angles(a))
        assert abs(b.roll - 10.0) < 1e-6
        assert abs(b.yaw - 35.0) < 1e-6
        assert abs(b.pitch + 20.0) < 1e-6

    def test_yaw_180(self):
        R = rotation_from_angles(RotationAngles(0.0, 180.0, 0.0))
        assert R[0, 0] == pytest.approx(-1.0, abs=1e-12)


class TestProjection:
    def test_principal_point(self):
        px, depth = project(Pose.identity(), K, (0.0, 0.0, 5.0))
        assert np.allclose(px, [320.0, 240.0])
        assert depth == 5.0

    def test_offset_point(self):
        px, _ = project(Pose.identity(), K, (1.0, 0.0, 5.0))
        assert np.allclose(px, [340.0, 240.0])

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project(Pose.identity(), K, (0.0, 0.0, -1.0))

    def test_unproject_principal(self):
        X = unproject(Pose.identity(), K, (320.0, 240.0), 7.5)
        assert np.allclose(X, [0.0, 0.0, 7.5])

    def test_zero_depth_rejected(self):
        with pytest.raises(InvalidDepth):
            unproject(Pose.identity(), K, (100.0, 100.0), 0.0)

    def test_round_trip_fixed(self):
        rng = np.random.default_rng(3)
        pose = Pose(random_rotation(rng), rng.normal(size=3))
        X = unproject(pose, K, (100.5, 77.25), 42.0)
        px, depth = project(pose, K, X)
        assert np.max(np.abs(px - [100.5, 77.25])) < 1e-6
        assert abs(depth - 42.0) / 42.0 < 1e-9

    def test_round_trip_property(self):
        # project(unproject(.)) over 10k random pixel/depth/pose samples.
        rng = np.random.default_rng(4)
        for _ in range(20):
            pose = Pose(random_rotation(rng), rng.normal(scale=50.0, size=3))
            px_in = rng.uniform([0, 0], [640, 480], size=(500, 2))
            d_in = rng.uniform(0.5, 300.0, size=500)
            world = geom.unproject_points(pose, K, px_in, d_in)
            px_out, d_out, ok = geom.project_points(pose, K, world)
            assert np.all(ok)
            assert np.max(np.abs(px_out - px_in)) < 1e-6
            assert np.max(np.abs(d_out - d_in) / d_in) < 1e-9


class TestGravity:
    def test_identity(self):
        assert np.allclose(gravity_direction(np.eye(3)), [0.0, 0.0, -1.0])

    def test_nadir_camera(self):
        # Optical axis pointing world-down: x east, y south, z down.
        R = np.diag([1.0, -1.0, -1.0])
        expected = R @ np.array([0.0, 0.0, -1.0])
        g = gravity_direction(R)
        assert np.allclose(g, expected)
        assert np.allclose(g, [0.0, 0.0, 1.0])

    def test_yaw_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            R = random_rotation(rng)
            g0 = gravity_direction(R)
            g1 = gravity_direction(R @ geom.rot_z(rng.uniform(-180, 180)))
            assert np.max(np.abs(g1 - g0)) < 1e-9

    def test_unit_norm(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            g = gravity_direction(random_rotation(rng))
            assert abs(np.linalg.norm(g) - 1.0) < 1e-9


class TestAngles:
    def test_wrap_distance(self):
        assert abs(geom.angle_diff_deg(350.0, 10.0)) == 20.0
        assert wrap_angle_deg(180.0) == 180.0
        assert wrap_angle_deg(-180.0) == 180.0
        assert wrap_angle_deg(190.0) == -170.0

    def test_construction_wraps(self):
        a = RotationAngles(roll=350.0, yaw=-190.0, pitch=540.0)
        assert a.roll == -10.0
        assert a.yaw == 170.0
        assert a.pitch == 180.0


class TestQuaternions:
    def test_round_trip(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            R = random_rotation(rng)
            R2 = geom.rotation_from_quat(geom.quat_from_rotation(R))
            assert np.max(np.abs(R2 - R)) < 1e-12

    def test_identity(self):
        q = geom.quat_from_rotation(np.eye(3))
        assert np.allclose(q, [1.0, 0.0, 0.0, 0.0])


class TestPose:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_compose_inverse(self):
        rng = np.random.default_rng(9)
        a = Pose(random_rotation(rng), rng.normal(size=3))
        b = Pose(random_rotation(rng), rng.normal(size=3))
        X = rng.normal(size=3)
        assert np.allclose(a.compose(b).transform(X), a.transform(b.transform(X)))
        ident = a.compose(a.inverse())
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(ident.translation, 0.0, atol=1e-12)

    def test_center(self):
        rng = np.random.default_rng(10)
        C = rng.normal(size=3)
        pose = Pose.from_center(random_rotation(rng), C)
        assert np.allclose(pose.center(), C)
        assert np.allclose(pose.transform(C), 0.0, atol=1e-12)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1.0, fy=1.0, cx=1.0, cy=1.0, width=10, height=10)
        with pytest.raises(ValueError):
            Intrinsics(fx=1.0, fy=1.0, cx=20.0, cy=1.0, width=10, height=10)
