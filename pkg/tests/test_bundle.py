import numpy as np
import pytest

from adverts.bundle import (
    BAOptions,
    apply_pose_increment,
    bundle_adjust,
    huber_weights,
    project_residuals,
    residual_jacobians,
)
from adverts.errors import TrackingError
from adverts.geometry import (
    CameraPose,
    Intrinsics,
    apply_similarity,
    rotation_from_axis_angle,
)

from conftest import looking_at_pose, random_rotation

K = Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0)


def cube_scene(rng, n_cams=6, n_pts=60, radius=4.0):
    """Cameras on an arc looking at a cube-ish point cloud at the origin."""
    pts = rng.uniform(-1.0, 1.0, (n_pts, 3))
    poses = []
    for i in range(n_cams):
        ang = (i / max(n_cams - 1, 1) - 0.5) * 0.9
        center = np.array([np.sin(ang) * radius, 0.3 * np.sin(2 * ang), -np.cos(ang) * radius])
        poses.append(looking_at_pose(center, [0.0, 0.0, 0.0]))
    obs_cam, obs_pt, obs_uv = [], [], []
    for c, pose in enumerate(poses):
        pc = pose.transform(pts)
        z = pc[:, 2]
        uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
        for p in range(n_pts):
            if z[p] > 0.1:
                obs_cam.append(c)
                obs_pt.append(p)
                obs_uv.append(uv[p])
    return poses, pts, np.array(obs_cam), np.array(obs_pt), np.array(obs_uv)


def perturb(rng, poses, pts, rot_deg=2.0, pt_frac=0.02, keep=(0,)):
    new_poses = []
    for i, pose in enumerate(poses):
        if i in keep:
            new_poses.append(pose)
            continue
        w = rng.normal(size=3)
        w = w / np.linalg.norm(w) * np.radians(rot_deg)
        t = rng.normal(size=3) * 0.02
        new_poses.append(apply_pose_increment(pose, np.concatenate([w, t])))
    new_pts = pts * (1.0 + pt_frac * rng.standard_normal(pts.shape))
    return new_poses, new_pts


class TestJacobians:
    def test_matches_central_finite_differences_100_states(self):
        # relative error of the full analytic Jacobian vs central differences
        rng = np.random.default_rng(0)
        h = 1e-6
        for state in range(100):
            pose = looking_at_pose(
                rng.uniform(-3, 3, 3) + [0, 0, -5.0], rng.uniform(-0.5, 0.5, 3)
            )
            X = rng.uniform(-1, 1, (3, 3))
            pc = pose.transform(X)
            if (pc[:, 2] < 0.5).any():
                continue
            obs_cam = np.zeros(3, dtype=int)
            obs_pt = np.arange(3)
            obs_uv = rng.uniform(0, 640, (3, 2))
            r0, xc = project_residuals([pose], X, obs_cam, obs_pt, obs_uv, K)
            J_cam, J_pt = residual_jacobians(xc, [pose], obs_cam, K)

            # finite differences over the 6 camera increment coordinates
            J_cam_fd = np.zeros_like(J_cam)
            for k_dim in range(6):
                d = np.zeros(6)
                d[k_dim] = h
                r_plus, _ = project_residuals(
                    [apply_pose_increment(pose, d)], X, obs_cam, obs_pt, obs_uv, K
                )
                r_minus, _ = project_residuals(
                    [apply_pose_increment(pose, -d)], X, obs_cam, obs_pt, obs_uv, K
                )
                J_cam_fd[:, :, k_dim] = (r_plus - r_minus) / (2 * h)
            # and over the 3 point coordinates
            J_pt_fd = np.zeros_like(J_pt)
            for k_dim in range(3):
                dX = np.zeros(3)
                dX[k_dim] = h
                r_plus, _ = project_residuals([pose], X + dX, obs_cam, obs_pt, obs_uv, K)
                r_minus, _ = project_residuals([pose], X - dX, obs_cam, obs_pt, obs_uv, K)
                J_pt_fd[:, :, k_dim] = (r_plus - r_minus) / (2 * h)

            rel_cam = np.abs(J_cam - J_cam_fd).max() / max(np.abs(J_cam_fd).max(), 1.0)
            rel_pt = np.abs(J_pt - J_pt_fd).max() / max(np.abs(J_pt_fd).max(), 1.0)
            assert rel_cam <= 1e-5, f"state {state}: camera Jacobian rel err {rel_cam:.2e}"
            assert rel_pt <= 1e-5, f"state {state}: point Jacobian rel err {rel_pt:.2e}"


class TestConvergence:
    def test_noiseless_input_at_optimum_converges_immediately(self):
        rng = np.random.default_rng(1)
        poses, pts, oc, op, uv = cube_scene(rng)
        res = bundle_adjust(poses, pts, oc, op, uv, K, scale_anchor=(0, 1))
        assert res.iterations <= 2
        assert res.cost_history[-1] <= 1e-12
        assert res.mean_reprojection <= 1e-9

    def test_perturbed_noisy_scene_recovers(self):
        rng = np.random.default_rng(2)
        poses, pts, oc, op, uv = cube_scene(rng, n_cams=8, n_pts=80)
        uv_noisy = uv + rng.normal(0, 0.5, uv.shape)
        p_poses, p_pts = perturb(rng, poses, pts)
        res = bundle_adjust(p_poses, p_pts, oc, op, uv_noisy, K, scale_anchor=(0, 1))
        assert res.mean_reprojection <= 0.75
        diffs = np.diff(res.cost_history)
        assert (diffs <= 1e-9).all(), "cost increased across an accepted step"

    def test_cost_non_increasing_over_20_noise_trials(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            poses, pts, oc, op, uv = cube_scene(rng, n_cams=4, n_pts=30)
            uv_noisy = uv + rng.normal(0, 0.5, uv.shape)
            p_poses, p_pts = perturb(rng, poses, pts)
            res = bundle_adjust(
                p_poses, p_pts, oc, op, uv_noisy, K, scale_anchor=(0, 1),
                options=BAOptions(max_iterations=40),
            )
            assert (np.diff(res.cost_history) <= 1e-9).all()
            assert res.mean_reprojection <= 1.0, f"trial {trial}"

    def test_gross_outlier_capped_by_huber(self):
        rng = np.random.default_rng(4)
        poses, pts, oc, op, uv = cube_scene(rng, n_cams=6, n_pts=50)
        p_poses, p_pts = perturb(rng, poses, pts, rot_deg=1.0, pt_frac=0.01)
        clean = bundle_adjust(p_poses, p_pts, oc, op, uv, K, scale_anchor=(0, 1))
        uv_out = uv.copy()
        uv_out[7] = uv[7] + [50.0, 0.0]  # one gross outlier
        dirty = bundle_adjust(p_poses, p_pts, oc, op, uv_out, K, scale_anchor=(0, 1))
        r_clean, _ = project_residuals(clean.poses, clean.points, oc, op, uv, K)
        r_dirty, _ = project_residuals(dirty.poses, dirty.points, oc, op, uv, K)
        inliers = np.ones(len(oc), dtype=bool)
        inliers[7] = False
        delta = np.abs(
            np.linalg.norm(r_clean[inliers], axis=1) - np.linalg.norm(r_dirty[inliers], axis=1)
        )
        assert delta.max() <= 0.05

    def test_fixed_camera_never_moves(self):
        rng = np.random.default_rng(5)
        poses, pts, oc, op, uv = cube_scene(rng)
        p_poses, p_pts = perturb(rng, poses, pts)
        res = bundle_adjust(p_poses, p_pts, oc, op, uv, K, fixed_cameras=(0,), scale_anchor=(0, 1))
        assert np.abs(res.poses[0].rotation - poses[0].rotation).max() < 1e-12
        assert np.abs(res.poses[0].translation - poses[0].translation).max() < 1e-9

    def test_scale_anchor_held(self):
        rng = np.random.default_rng(6)
        poses, pts, oc, op, uv = cube_scene(rng)
        p_poses, p_pts = perturb(rng, poses, pts)
        b0 = np.linalg.norm(p_poses[0].center() - p_poses[1].center())
        res = bundle_adjust(p_poses, p_pts, oc, op, uv, K, scale_anchor=(0, 1))
        b1 = np.linalg.norm(res.poses[0].center() - res.poses[1].center())
        assert b1 == pytest.approx(b0, rel=1e-9)

    def test_non_finite_initialisation_raises(self):
        rng = np.random.default_rng(7)
        poses, pts, oc, op, uv = cube_scene(rng)
        bad_pts = pts.copy()
        bad_pts[0] = [np.nan, 0, 0]
        with pytest.raises(TrackingError, match="non-finite"):
            bundle_adjust(poses, bad_pts, oc, op, uv, K)

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        poses, pts, oc, op, uv = cube_scene(rng)
        p_poses, p_pts = perturb(rng, poses, pts)
        a = bundle_adjust(p_poses, p_pts, oc, op, uv, K, scale_anchor=(0, 1))
        b = bundle_adjust(p_poses, p_pts, oc, op, uv, K, scale_anchor=(0, 1))
        assert np.array_equal(a.points, b.points)
        for pa, pb in zip(a.poses, b.poses):
            assert np.array_equal(pa.rotation, pb.rotation)
            assert np.array_equal(pa.translation, pb.translation)


class TestGaugeInvariance:
    def test_similarity_transformed_input_gives_transformed_solution(self):
        # noiseless: both runs land on the exact global optimum of their
        # gauge; the transformed gauge optimum is the transformed optimum
        rng = np.random.default_rng(9)
        poses, pts, oc, op, uv = cube_scene(rng, n_cams=5, n_pts=40)
        p_poses, p_pts = perturb(rng, poses, pts, rot_deg=1.0, pt_frac=0.01, keep=(0,))
        res_a = bundle_adjust(p_poses, p_pts, oc, op, uv, K, scale_anchor=(0, 1))

        s, Q, d = 1.7, random_rotation(rng), rng.uniform(-2, 2, 3)
        t_poses = [apply_similarity(s, Q, d, pose=p) for p in p_poses]
        t_pts = np.stack([apply_similarity(s, Q, d, point=x) for x in p_pts])
        res_b = bundle_adjust(t_poses, t_pts, oc, op, uv, K, scale_anchor=(0, 1))

        for pa, pb in zip(res_a.poses, res_b.poses):
            expect = apply_similarity(s, Q, d, pose=pa)
            assert np.abs(expect.rotation - pb.rotation).max() < 1e-6
            assert np.abs(expect.translation / s - pb.translation / s).max() < 1e-6
        expect_pts = np.stack([apply_similarity(s, Q, d, point=x) for x in res_a.points])
        assert np.abs(expect_pts - res_b.points).max() / s < 1e-6
