"""Sparse bundle adjustment: Levenberg-Marquardt on reprojection error over
camera poses and 3D points.

Structure is exploited through the Schur complement: the block-diagonal
point system (3x3 blocks) is eliminated first, leaving a dense reduced
camera system (cameras are few, points are many). Pose increments live in
the local tangent frame, ``x_cam' = exp(w) x_cam + t``, giving closed-form
Jacobians (verified against central finite differences in the tests).

Robustness: Huber loss on the per-observation pixel error, folded into LM
as iteratively reweighted least squares. The gauge is fixed by anchoring
the first keyframe pose and renormalising the scene scale so the first
keyframe baseline keeps its initial length (a pure gauge motion, so the
cost is untouched).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import TrackingError
from .geometry import CameraPose, Intrinsics, rotation_from_axis_angle

HUBER_DELTA = 2.0  # px
INIT_DAMPING = 1e-3
DAMPING_UP = 10.0
DAMPING_DOWN = 10.0
MAX_DAMPING = 1e12
REL_TOL = 1e-8
MAX_ITERATIONS = 100
COST_FLOOR = 1e-13  # squared-pixel cost below this is machine zero
TRIM_FACTOR = 3.0  # residuals beyond TRIM_FACTOR * delta are dropped
MAX_TRIM_ROUNDS = 2


@dataclass
class BAOptions:
    max_iterations: int = MAX_ITERATIONS
    tol: float = REL_TOL
    huber_delta: float = HUBER_DELTA
    init_damping: float = INIT_DAMPING
    verbose: bool = False


@dataclass
class BAResult:
    poses: list[CameraPose]
    points: np.ndarray
    cost_history: list[float]  # robust cost after each accepted step
    mean_reprojection: float  # over kept (untrimmed) observations
    iterations: int
    trimmed: np.ndarray | None = None  # observations dropped as gross outliers


def project_residuals(poses, points, obs_cam, obs_pt, obs_uv, k: Intrinsics):
    """Raw reprojection residuals r = projection - observation, (m, 2)."""
    R = np.stack([p.rotation for p in poses])
    T = np.stack([p.translation for p in poses])
    X = points[obs_pt]
    xc = np.einsum("mij,mj->mi", R[obs_cam], X) + T[obs_cam]
    z = xc[:, 2]
    u = k.fx * xc[:, 0] / z + k.cx
    v = k.fy * xc[:, 1] / z + k.cy
    return np.stack([u - obs_uv[:, 0], v - obs_uv[:, 1]], axis=1), xc


def residual_jacobians(xc: np.ndarray, poses, obs_cam, k: Intrinsics):
    """Analytic Jacobians of the reprojection residual.

    Returns (J_cam (m, 2, 6), J_pt (m, 2, 3)) for the parameterisation
    [w (local rotation), t] per camera and X per point, with the camera
    increment acting as x_cam' = exp(w) x_cam + t.
    """
    m = len(xc)
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    duv = np.zeros((m, 2, 3))
    duv[:, 0, 0] = k.fx / z
    duv[:, 0, 2] = -k.fx * x / z**2
    duv[:, 1, 1] = k.fy / z
    duv[:, 1, 2] = -k.fy * y / z**2

    # d x_cam / d w = -[x_cam]_x
    dxdw = np.zeros((m, 3, 3))
    dxdw[:, 0, 1] = z
    dxdw[:, 0, 2] = -y
    dxdw[:, 1, 0] = -z
    dxdw[:, 1, 2] = x
    dxdw[:, 2, 0] = y
    dxdw[:, 2, 1] = -x

    J_cam = np.zeros((m, 2, 6))
    J_cam[:, :, :3] = np.einsum("mij,mjk->mik", duv, dxdw)
    J_cam[:, :, 3:] = duv

    R = np.stack([p.rotation for p in poses])
    J_pt = np.einsum("mij,mjk->mik", duv, R[obs_cam])
    return J_cam, J_pt


def huber_weights(r: np.ndarray, weights: np.ndarray, delta: float):
    """IRLS weights and robust cost for Huber on the per-observation norm."""
    e = np.linalg.norm(r, axis=1)
    w_rob = np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))
    cost = np.where(e <= delta, 0.5 * e**2, delta * e - 0.5 * delta**2)
    return weights * w_rob, float((weights * cost).sum())


def apply_pose_increment(pose: CameraPose, delta: np.ndarray) -> CameraPose:
    dR = rotation_from_axis_angle(delta[:3])
    return CameraPose(dR @ pose.rotation, dR @ pose.translation + delta[3:], check=False)


def bundle_adjust(
    poses: list[CameraPose],
    points: np.ndarray,
    obs_cam: np.ndarray,
    obs_pt: np.ndarray,
    obs_uv: np.ndarray,
    k: Intrinsics,
    obs_weight: np.ndarray | None = None,
    fixed_cameras=(0,),
    scale_anchor: tuple[int, int] | None = None,
    options: BAOptions | None = None,
) -> BAResult:
    """Jointly refine poses and points by sparse Levenberg-Marquardt.

    ``fixed_cameras`` are gauge anchors whose poses never move;
    ``scale_anchor`` names two cameras whose centre distance is held at its
    initial value by rescaling the scene after each accepted step.
    """
    opts = options or BAOptions()
    poses = list(poses)
    points = np.array(points, dtype=np.float64)
    obs_cam = np.asarray(obs_cam, dtype=np.int64)
    obs_pt = np.asarray(obs_pt, dtype=np.int64)
    obs_uv = np.asarray(obs_uv, dtype=np.float64)
    weights = (
        np.ones(len(obs_cam)) if obs_weight is None else np.asarray(obs_weight, dtype=np.float64)
    )
    if len(obs_cam) == 0:
        raise TrackingError("bundle adjustment needs at least one observation")
    n_cams, n_pts = len(poses), len(points)
    fixed = set(fixed_cameras)
    free_cams = [c for c in range(n_cams) if c not in fixed]
    slot_of_cam = np.full(n_cams, -1, dtype=np.int64)
    for i, c in enumerate(free_cams):
        slot_of_cam[c] = i
    nf = len(free_cams)

    baseline0 = None
    if scale_anchor is not None:
        a, b = scale_anchor
        baseline0 = float(np.linalg.norm(poses[a].center() - poses[b].center()))
        if baseline0 < 1e-12:
            scale_anchor = None

    r, _ = project_residuals(poses, points, obs_cam, obs_pt, obs_uv, k)
    _, cost0 = huber_weights(r, weights, opts.huber_delta)
    if not np.isfinite(cost0):
        bad = int((~np.isfinite(r).all(axis=1)).sum())
        raise TrackingError(f"non-finite initial cost: {bad}/{len(r)} residuals invalid")

    cost_history: list[float] = [cost0]
    iterations = 0
    active = weights.copy()
    trimmed = np.zeros(len(obs_cam), dtype=bool)
    for _ in range(MAX_TRIM_ROUNDS + 1):
        poses, points, r, its = _lm_minimize(
            poses, points, obs_cam, obs_pt, obs_uv, k, active,
            free_cams, slot_of_cam, nf, n_pts, scale_anchor, baseline0,
            cost_history, opts,
        )
        iterations += its
        # gross outliers (far beyond the Huber corner) still exert a
        # constant pull; drop them and re-converge on the survivors
        e = np.linalg.norm(r, axis=1)
        new_out = (~trimmed) & (e > TRIM_FACTOR * opts.huber_delta)
        if not new_out.any():
            break
        trimmed |= new_out
        active = np.where(trimmed, 0.0, weights)
        _, cost = huber_weights(r, active, opts.huber_delta)
        cost_history.append(cost)

    e = np.linalg.norm(r, axis=1)
    kept = ~trimmed
    return BAResult(
        poses=poses,
        points=points,
        cost_history=cost_history,
        mean_reprojection=float(e[kept].mean()) if kept.any() else 0.0,
        iterations=iterations,
        trimmed=trimmed,
    )


def _lm_minimize(
    poses, points, obs_cam, obs_pt, obs_uv, k, weights,
    free_cams, slot_of_cam, nf, n_pts, scale_anchor, baseline0,
    cost_history, opts,
):
    """One Levenberg-Marquardt descent; appends accepted costs in place."""
    r, xc = project_residuals(poses, points, obs_cam, obs_pt, obs_uv, k)
    w_irls, cost = huber_weights(r, weights, opts.huber_delta)
    lam = opts.init_damping
    iterations = 0
    m = len(obs_cam)
    slots = slot_of_cam[obs_cam]
    free_obs = slots >= 0
    rows = np.broadcast_to(
        (2 * np.arange(m))[:, None, None] + np.array([[0], [1]])[None], (m, 2, 6)
    )
    cols = np.broadcast_to(
        (slots * 6)[:, None, None] + np.arange(6)[None, None, :], (m, 2, 6)
    )
    sel = np.broadcast_to(free_obs[:, None, None], (m, 2, 6))
    prow = np.broadcast_to(
        (2 * np.arange(m))[:, None, None] + np.array([[0], [1]])[None], (m, 2, 3)
    )
    pcol = np.broadcast_to(
        (obs_pt * 3)[:, None, None] + np.arange(3)[None, None, :], (m, 2, 3)
    )

    for _ in range(opts.max_iterations):
        iterations += 1
        J_cam, J_pt = residual_jacobians(xc, poses, obs_cam, k)
        sw = np.sqrt(w_irls)
        Jc = J_cam * sw[:, None, None]
        Jp = J_pt * sw[:, None, None]
        rw = r * sw[:, None]

        V = np.zeros((n_pts, 3, 3))
        np.add.at(V, obs_pt, np.einsum("mki,mkj->mij", Jp, Jp))
        g_p = np.zeros((n_pts, 3))
        np.add.at(g_p, obs_pt, np.einsum("mki,mk->mi", Jp, rw))

        Jc_sp = sparse.csr_matrix(
            (Jc[sel].ravel(), (rows[sel].ravel(), cols[sel].ravel())),
            shape=(2 * m, 6 * nf),
        )
        Jp_sp = sparse.csr_matrix(
            (Jp.ravel(), (prow.ravel(), pcol.ravel())), shape=(2 * m, 3 * n_pts)
        )
        U = (Jc_sp.T @ Jc_sp).toarray()
        W = (Jc_sp.T @ Jp_sp).tocsr()
        g_c = Jc_sp.T @ rw.ravel()

        accepted = False
        improvement = 0.0
        while lam <= MAX_DAMPING:
            try:
                d_cam, d_pt = _solve_schur(U, V, W, g_c, g_p, lam, nf, n_pts)
            except np.linalg.LinAlgError:
                lam *= DAMPING_UP
                continue
            new_poses = list(poses)
            for c in free_cams:
                new_poses[c] = apply_pose_increment(poses[c], d_cam[slot_of_cam[c]])
            new_points = points + d_pt
            if scale_anchor is not None:
                new_poses, new_points = _renormalise_scale(
                    new_poses, new_points, scale_anchor, baseline0
                )
            r_new, xc_new = project_residuals(new_poses, new_points, obs_cam, obs_pt, obs_uv, k)
            _, cost_new = huber_weights(r_new, weights, opts.huber_delta)
            if np.isfinite(cost_new) and cost_new <= cost:
                poses, points = new_poses, new_points
                r, xc = r_new, xc_new
                w_irls, _ = huber_weights(r, weights, opts.huber_delta)
                improvement = cost - cost_new
                cost = cost_new
                cost_history.append(cost)
                lam = max(lam / DAMPING_DOWN, 1e-15)
                accepted = True
                if opts.verbose:
                    print(f"  cost {cost:.6e} lam {lam:.1e}")
                break
            lam *= DAMPING_UP
        if not accepted:
            break
        if cost <= COST_FLOOR or improvement <= opts.tol * max(cost, 1e-30):
            break
    return poses, points, r, iterations


def _solve_schur(U, V, W, g_c, g_p, lam, nf, n_pts):
    """Eliminate the point blocks, solve the reduced camera system densely,
    then back-substitute the point increments."""
    Ud = U.copy()
    du = np.diag(Ud).copy()
    du[du <= 0] = 1e-12
    Ud[np.arange(6 * nf), np.arange(6 * nf)] += lam * du

    Vd = V.copy()
    dv = np.einsum("pii->pi", Vd).copy()
    dv[dv <= 0] = 1e-12
    for i in range(3):
        Vd[:, i, i] += lam * dv[:, i]
    Vinv = np.linalg.inv(Vd)  # raises LinAlgError when any block is singular

    Vinv_sp = sparse.bsr_matrix(
        (Vinv, np.arange(n_pts), np.arange(n_pts + 1)), shape=(3 * n_pts, 3 * n_pts)
    )
    WVinv = (W @ Vinv_sp).tocsr()
    if nf:
        S = Ud - (WVinv @ W.T).toarray()
        rhs = -g_c + WVinv @ g_p.ravel()
        d_cam = np.linalg.solve(S, rhs).reshape(nf, 6)
    else:
        d_cam = np.zeros((0, 6))
    back = (W.T @ d_cam.ravel()).reshape(n_pts, 3) if nf else np.zeros((n_pts, 3))
    d_pt = np.einsum("pij,pj->pi", Vinv, -g_p - back)
    return d_cam, d_pt


def _renormalise_scale(poses, points, scale_anchor, baseline0):
    """Rescale the scene about the first anchor camera's centre so the
    anchor baseline keeps its initial length. Pure gauge motion: every
    reprojection is unchanged."""
    a, b = scale_anchor
    ca, cb = poses[a].center(), poses[b].center()
    d = np.linalg.norm(ca - cb)
    if d < 1e-15:
        return poses, points
    s = baseline0 / d
    if abs(s - 1.0) < 1e-15:
        return poses, points
    new_points = ca + s * (points - ca)
    new_poses = []
    for i, pose in enumerate(poses):
        if i == a:
            new_poses.append(pose)  # scaling is about this camera's centre
            continue
        c_new = ca + s * (pose.center() - ca)
        new_poses.append(CameraPose(pose.rotation, -pose.rotation @ c_new, check=False))
    return new_poses, new_points
