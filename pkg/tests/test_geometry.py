import math

import numpy as np
import pytest

from adverts.errors import (
    BehindCameraError,
    DegenerateGeometryError,
    GeometryError,
    InsufficientDataError,
)
from adverts.geometry import (
    CameraPose,
    Intrinsics,
    apply_similarity,
    backproject,
    pixel_ray,
    project,
    project_points,
    relative_pose_from_matches,
    rotation_from_axis_angle,
    solve_pose_pnp,
    triangulate,
)

from conftest import looking_at_pose, random_pose, random_rotation


class TestProject:
    def test_optical_axis_hits_principal_point(self, k640):
        uv = project([0.0, 0.0, 2.0], CameraPose.identity(), k640)
        assert np.allclose(uv, [k640.cx, k640.cy])

    def test_simple_offset(self):
        k = Intrinsics(100.0, 100.0, 50.0, 50.0)
        uv = project([1.0, 0.0, 2.0], CameraPose.identity(), k)
        assert np.allclose(uv, [100.0, 50.0])

    def test_matches_homogeneous_matrix_oracle(self, k640):
        # oracle: apply the 3x4 matrix K[R|T] to homogeneous coordinates
        rng = np.random.default_rng(7)
        for _ in range(50):
            pose = random_pose(rng)
            X = rng.uniform(-1, 1, 3)
            z = pose.transform(X)[2]
            if z <= 1e-6:
                continue
            P = k640.matrix() @ pose.matrix34()
            xh = P @ np.append(X, 1.0)
            assert np.allclose(project(X, pose, k640), xh[:2] / xh[2], atol=1e-9)

    def test_behind_camera_raises(self, k640):
        with pytest.raises(BehindCameraError):
            project([0.0, 0.0, -1.0], CameraPose.identity(), k640)
        with pytest.raises(BehindCameraError):
            project([0.0, 0.0, 0.0], CameraPose.identity(), k640)


class TestBackproject:
    def test_principal_point_identity_pose(self, k640):
        X = backproject([k640.cx, k640.cy], 3.0, CameraPose.identity(), k640)
        assert np.allclose(X, [0.0, 0.0, 3.0])

    def test_round_trip_identity_pose(self, k640):
        rng = np.random.default_rng(11)
        for _ in range(100):
            px = rng.uniform(0, 640, 2)
            d = rng.uniform(0.1, 50.0)
            X = backproject(px, d, CameraPose.identity(), k640)
            assert np.linalg.norm(project(X, CameraPose.identity(), k640) - px) < 1e-6

    def test_round_trip_general_pose(self, k640):
        rng = np.random.default_rng(13)
        for _ in range(100):
            pose = random_pose(rng)
            px = rng.uniform(0, 640, 2)
            d = rng.uniform(0.1, 50.0)
            X = backproject(px, d, pose, k640)
            assert np.linalg.norm(project(X, pose, k640) - px) < 1e-6
            assert abs(pose.transform(X)[2] - d) < 1e-9

    def test_nonpositive_depth_rejected(self, k640):
        with pytest.raises(GeometryError):
            backproject([10.0, 10.0], 0.0, CameraPose.identity(), k640)


class TestPoseAlgebra:
    def test_composition_associative(self):
        rng = np.random.default_rng(3)
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = a.compose(b).compose(c)
        rhs = a.compose(b.compose(c))
        assert np.abs(lhs.rotation - rhs.rotation).max() < 1e-9
        assert np.abs(lhs.translation - rhs.translation).max() < 1e-9

    def test_compose_matches_sequential_transform(self):
        rng = np.random.default_rng(5)
        a, b = random_pose(rng), random_pose(rng)
        X = rng.uniform(-1, 1, 3)
        assert np.allclose(a.compose(b).transform(X), b.transform(a.transform(X)), atol=1e-12)

    def test_inverse(self):
        rng = np.random.default_rng(9)
        p = random_pose(rng)
        ident = p.compose(p.inverse())
        assert np.abs(ident.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(ident.translation).max() < 1e-12

    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            CameraPose(np.eye(3) * 1.1, np.zeros(3))


class TestTriangulate:
    def _two_poses(self):
        pose1 = CameraPose.identity()
        R2 = rotation_from_axis_angle([0.0, -math.radians(20), 0.0])
        C2 = np.array([1.5, 0.0, 0.0])
        pose2 = CameraPose(R2, -R2 @ C2)
        return pose1, pose2

    def test_exact_recovery(self, k640):
        pose1, pose2 = self._two_poses()
        X = np.array([0.3, -0.2, 4.0])
        got, res = triangulate(project(X, pose1, k640), pose1, project(X, pose2, k640), pose2, k640)
        assert np.linalg.norm(got - X) < 1e-6
        assert res < 1e-6

    def test_identical_poses_degenerate(self, k640):
        pose = CameraPose.identity()
        with pytest.raises(DegenerateGeometryError):
            triangulate([100.0, 100.0], pose, [101.0, 100.0], pose, k640)

    def test_near_parallel_rays_degenerate(self, k640):
        # tiny baseline relative to depth: rays through the same pixel are
        # separated by far less than the 0.5 degree conditioning threshold
        pose1 = CameraPose.identity()
        pose2 = CameraPose(np.eye(3), np.array([-1e-4, 0.0, 0.0]))
        X = np.array([0.0, 0.0, 50.0])
        with pytest.raises(DegenerateGeometryError):
            triangulate(project(X, pose1, k640), pose1, project(X, pose2, k640), pose2, k640)

    def test_symmetric_in_views(self, k640):
        pose1, pose2 = self._two_poses()
        X = np.array([-0.4, 0.25, 3.0])
        u1, u2 = project(X, pose1, k640), project(X, pose2, k640)
        a, _ = triangulate(u1, pose1, u2, pose2, k640)
        b, _ = triangulate(u2, pose2, u1, pose1, k640)
        assert np.linalg.norm(a - b) < 1e-9

    def test_noise_error_within_monte_carlo_oracle_bound(self, k640):
        # Oracle: midpoint of the two viewing rays (independent of the DLT
        # path). Over 1000 seeded trials at 0.5 px noise and 30 deg baseline
        # the oracle error distribution was mean 0.00655 / max 0.0297 scene
        # units; production triangulation must stay within those bounds
        # (frozen with a small margin).
        ORACLE_MEAN_BOUND = 0.0070
        ORACLE_MAX_BOUND = 0.0320
        rng = np.random.default_rng(20240817)
        ang = math.radians(30.0)
        errs = []
        for _ in range(1000):
            X = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2.5, 4.0)])
            pose1 = CameraPose.identity()
            C2 = np.array([math.sin(ang) * 3.0, 0.0, 3.0 - math.cos(ang) * 3.0])
            R2 = rotation_from_axis_angle(np.array([0.0, -ang, 0.0]))
            pose2 = CameraPose(R2, -R2 @ C2)
            u1 = project(X, pose1, k640) + rng.normal(0, 0.5, 2)
            u2 = project(X, pose2, k640) + rng.normal(0, 0.5, 2)
            got, _ = triangulate(u1, pose1, u2, pose2, k640)
            errs.append(np.linalg.norm(got - X))
        errs = np.array(errs)
        assert errs.mean() <= ORACLE_MEAN_BOUND
        assert errs.max() <= ORACLE_MAX_BOUND


class TestPnP:
    def _scene(self, rng, n=20):
        pts = rng.uniform(-1, 1, (n, 3)) + [0, 0, 4.0]
        R = random_rotation(rng)
        # keep the scene in front: small rotation, camera near origin
        w = rng.normal(size=3)
        R = rotation_from_axis_angle(w / np.linalg.norm(w) * rng.uniform(0, 0.3))
        T = rng.uniform(-0.5, 0.5, 3)
        return pts, CameraPose(R, T)

    def test_noiseless_recovery(self, k640):
        rng = np.random.default_rng(21)
        pts, pose = self._scene(rng)
        corr = [(p, project(p, pose, k640)) for p in pts]
        got, res = solve_pose_pnp(corr, k640)
        dR = got.rotation.T @ pose.rotation
        angle = math.acos(min(1.0, max(-1.0, (np.trace(dR) - 1) / 2)))
        assert angle < 1e-6
        assert np.linalg.norm(got.translation - pose.translation) < 1e-6
        assert res < 1e-6

    def test_insufficient_points(self, k640):
        rng = np.random.default_rng(23)
        pts, pose = self._scene(rng, n=3)
        corr = [(p, project(p, pose, k640)) for p in pts]
        with pytest.raises(InsufficientDataError):
            solve_pose_pnp(corr, k640)

    def test_collinear_points_degenerate(self, k640):
        pts = np.array([[0.0, 0.0, 4.0 + 0.1 * i] for i in range(10)])
        corr = [(p, [320.0, 240.0]) for p in pts]
        with pytest.raises(DegenerateGeometryError):
            solve_pose_pnp(corr, k640)

    def test_noisy_mean_residual_below_1px(self, k640):
        rng = np.random.default_rng(25)
        for _ in range(10):
            pts, pose = self._scene(rng)
            corr = [(p, project(p, pose, k640) + rng.normal(0, 0.5, 2)) for p in pts]
            _, res = solve_pose_pnp(corr, k640)
            assert res <= 1.0


class TestRelativePose:
    def test_two_view_recovery_up_to_scale(self, k640):
        rng = np.random.default_rng(31)
        pts = rng.uniform(-1, 1, (20, 3)) + [0, 0, 4.0]
        R2 = rotation_from_axis_angle([0.05, -0.3, 0.02])
        C2 = np.array([1.2, 0.1, 0.2])
        pose2 = CameraPose(R2, -R2 @ C2)
        u1 = np.array([project(p, CameraPose.identity(), k640) for p in pts])
        u2 = np.array([project(p, pose2, k640) for p in pts])
        got = relative_pose_from_matches(u1, u2, k640)
        assert np.abs(got.rotation - pose2.rotation).max() < 1e-6
        t_dir = pose2.translation / np.linalg.norm(pose2.translation)
        assert np.linalg.norm(got.translation - t_dir) < 1e-6


class TestGaugeInvariance:
    def test_triangulate_similarity_equivariant(self, k640):
        rng = np.random.default_rng(41)
        X = np.array([0.2, -0.1, 5.0])
        pose1 = CameraPose.identity()
        pose2 = looking_at_pose([2.0, 0.5, 0.3], X)
        u1, u2 = project(X, pose1, k640), project(X, pose2, k640)
        s, Q, d = 2.5, random_rotation(rng), rng.uniform(-1, 1, 3)
        tp1 = apply_similarity(s, Q, d, pose=pose1)
        tp2 = apply_similarity(s, Q, d, pose=pose2)
        # projections are unchanged by a consistent similarity
        assert np.allclose(project(apply_similarity(s, Q, d, point=X), tp1, k640), u1, atol=1e-7)
        solve_then_transform = apply_similarity(s, Q, d, point=triangulate(u1, pose1, u2, pose2, k640)[0])
        transform_then_solve = triangulate(u1, tp1, u2, tp2, k640)[0]
        assert np.linalg.norm(solve_then_transform - transform_then_solve) < 1e-6

    def test_pnp_similarity_equivariant(self, k640):
        rng = np.random.default_rng(43)
        pts = rng.uniform(-1, 1, (20, 3)) + [0, 0, 4.0]
        pose = CameraPose(rotation_from_axis_angle([0.1, 0.2, -0.05]), np.array([0.3, -0.2, 0.1]))
        corr = [(p, project(p, pose, k640)) for p in pts]
        s, Q, d = 0.5, random_rotation(rng), rng.uniform(-2, 2, 3)
        corr_t = [(apply_similarity(s, Q, d, point=p), px) for p, px in corr]
        got_t, _ = solve_pose_pnp(corr_t, k640)
        expect = apply_similarity(s, Q, d, pose=pose)
        assert np.abs(got_t.rotation - expect.rotation).max() < 1e-6
        assert np.linalg.norm(got_t.translation - expect.translation) < 1e-6


def test_project_points_matches_scalar(k640):
    rng = np.random.default_rng(51)
    pose = random_pose(rng)
    pts = rng.uniform(-1, 1, (40, 3)) + pose.center() + pose.rotation.T @ [0, 0, 5.0]
    uv, z = project_points(pts, pose, k640)
    for i, p in enumerate(pts):
        if z[i] > 1e-6:
            assert np.allclose(uv[i], project(p, pose, k640), atol=1e-12)


def test_pixel_ray_passes_through_backprojection(k640):
    rng = np.random.default_rng(53)
    pose = random_pose(rng)
    px = [123.4, 210.9]
    ray = pixel_ray(px, pose, k640)
    X = backproject(px, 7.0, pose, k640)
    c = pose.center()
    d = X - c
    assert np.linalg.norm(np.cross(d / np.linalg.norm(d), ray)) < 1e-9
