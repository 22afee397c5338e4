"""Pinhole camera model and multi-view geometry primitives.

Conventions (fixed project-wide):

- poses are world -> camera: ``x_cam = R @ x_world + T``
- pixel coordinates are continuous, ``u`` along columns, ``v`` along rows;
  the sample position of array element ``img[i, j]`` is ``(u, v) = (j, i)``
- monocular scale is arbitrary; solvers fix the gauge by convention
  (first camera at identity, unit first baseline) and callers may re-gauge
  with :func:`apply_similarity`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, GeometryError, InsufficientDataError

# Points with camera-space depth below this are treated as behind the camera.
Z_EPS = 1e-9

# Triangulation rays meeting at less than this angle are considered parallel.
MIN_RAY_ANGLE_DEG = 0.5

ORTHONORMALITY_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with zero skew."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def default_for(cls, width: int, height: int) -> "Intrinsics":
        """Estimate used when no calibration is supplied: f = 0.9 * max dim,
        principal point at the image centre."""
        f = 0.9 * max(width, height)
        return cls(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"])


class CameraPose:
    """World -> camera rigid transform ``x_cam = R @ x_world + T``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: np.ndarray, translation: np.ndarray, check: bool = True):
        R = np.asarray(rotation, dtype=float).reshape(3, 3)
        T = np.asarray(translation, dtype=float).reshape(3)
        if check:
            err = np.abs(R.T @ R - np.eye(3)).max()
            if err > 1e-6:
                raise GeometryError(f"rotation not orthonormal (err {err:.2e})")
            if abs(np.linalg.det(R) - 1.0) > 1e-6:
                raise GeometryError("rotation determinant != +1")
            if err > ORTHONORMALITY_TOL:
                R = orthonormalize(R)
        self.rotation = R
        self.translation = T

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3), check=False)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into camera coordinates."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, C = -R^T T."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation, check=False)

    def compose(self, then: "CameraPose") -> "CameraPose":
        """Pose equivalent to applying ``self`` then ``then``."""
        return CameraPose(
            then.rotation @ self.rotation,
            then.rotation @ self.translation + then.translation,
            check=False,
        )

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])

    def almost_equal(self, other: "CameraPose", tol: float = 1e-9) -> bool:
        return (
            np.abs(self.rotation - other.rotation).max() <= tol
            and np.abs(self.translation - other.translation).max() <= tol
        )

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]))

    def __repr__(self):
        return f"CameraPose(C={np.round(self.center(), 4).tolist()})"


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (SVD projection)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))])
    return U @ D @ Vt


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; exact Taylor fallback near zero."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of Rodrigues' formula."""
    cos_t = (np.trace(R) - 1.0) / 2.0
    cos_t = min(1.0, max(-1.0, cos_t))
    theta = math.acos(cos_t)
    if theta < 1e-12:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if abs(math.pi - theta) < 1e-6:
        # near pi the off-diagonal formula degenerates; use the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs from off-diagonals
        if axis[0] > 0:
            axis[1] = math.copysign(axis[1], A[0, 1])
            axis[2] = math.copysign(axis[2], A[0, 2])
        elif axis[1] > 0:
            axis[2] = math.copysign(axis[2], A[1, 2])
        n = np.linalg.norm(axis)
        if n == 0:
            return np.zeros(3)
        return axis / n * theta
    return (
        theta
        / (2.0 * math.sin(theta))
        * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    )


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    return math.degrees(np.linalg.norm(axis_angle_from_rotation(Ra.T @ Rb)))


# ---------------------------------------------------------------------------
# projection / back-projection


def project(p, pose: CameraPose, k: Intrinsics):
    """Project one world point to pixel coordinates (u, v).

    Raises :class:`BehindCameraError` if the point has camera depth <= Z_EPS.
    """
    pc = pose.transform(np.asarray(p, dtype=float).reshape(3))
    z = pc[2]
    if z <= Z_EPS:
        raise BehindCameraError(f"point at camera depth {z:.3e}")
    return np.array([k.fx * pc[0] / z + k.cx, k.fy * pc[1] / z + k.cy])


def project_points(points: np.ndarray, pose: CameraPose, k: Intrinsics):
    """Vectorised projection. Returns (uv (N,2), z (N,)); no depth check."""
    pc = pose.transform(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    uv = np.empty((len(pc), 2))
    uv[:, 0] = k.fx * pc[:, 0] / z + k.cx
    uv[:, 1] = k.fy * pc[:, 1] / z + k.cy
    return uv, z


def backproject(px, depth: float, pose: CameraPose, k: Intrinsics) -> np.ndarray:
    """Pixel + camera depth -> world point (inverse of :func:`project`)."""
    if depth <= 0:
        raise GeometryError("depth must be positive")
    u, v = float(px[0]), float(px[1])
    pc = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return pose.rotation.T @ (pc - pose.translation)


def backproject_pixels(us: np.ndarray, vs: np.ndarray, depths: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Vectorised back-projection into *camera* coordinates, shape (N, 3)."""
    z = np.asarray(depths, dtype=float)
    x = (np.asarray(us, dtype=float) - k.cx) / k.fx * z
    y = (np.asarray(vs, dtype=float) - k.cy) / k.fy * z
    return np.stack([x, y, z], axis=-1)


def pixel_ray(px, pose: CameraPose, k: Intrinsics) -> np.ndarray:
    """Unit direction of the viewing ray through ``px``, in world coordinates."""
    d = np.array([(px[0] - k.cx) / k.fx, (px[1] - k.cy) / k.fy, 1.0])
    d = pose.rotation.T @ d
    return d / np.linalg.norm(d)


# ---------------------------------------------------------------------------
# triangulation


def triangulate(px1, pose1: CameraPose, px2, pose2: CameraPose, k: Intrinsics):
    """Two-view triangulation: DLT followed by one Gauss-Newton step on the
    reprojection error.

    Returns ``(point_world (3,), max_residual_px)``.
    """
    c1, c2 = pose1.center(), pose2.center()
    baseline = np.linalg.norm(c1 - c2)
    if baseline < 1e-12:
        raise DegenerateGeometryError("zero baseline between views")
    r1 = pixel_ray(px1, pose1, k)
    r2 = pixel_ray(px2, pose2, k)
    cos_a = abs(float(np.dot(r1, r2)))
    if cos_a > math.cos(math.radians(MIN_RAY_ANGLE_DEG)):
        raise DegenerateGeometryError(
            f"rays near-parallel ({math.degrees(math.acos(min(1.0, cos_a))):.3f} deg)"
        )

    K = k.matrix()
    P1 = K @ pose1.matrix34()
    P2 = K @ pose2.matrix34()
    A = np.empty((4, 4))
    for i, (P, px) in enumerate(((P1, px1), (P2, px2))):
        u, v = float(px[0]), float(px[1])
        A[2 * i] = u * P[2] - P[0]
        A[2 * i + 1] = v * P[2] - P[1]
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-15:
        raise DegenerateGeometryError("triangulated point at infinity")
    X = Xh[:3] / Xh[3]

    # one Gauss-Newton step on the 4-vector of reprojection residuals
    X = _refine_point(X, [(px1, pose1), (px2, pose2)], k, iters=1)

    res = 0.0
    for px, pose in ((px1, pose1), (px2, pose2)):
        res = max(res, float(np.linalg.norm(project(X, pose, k) - np.asarray(px, dtype=float))))
    return X, res


def _refine_point(X, observations, k: Intrinsics, iters: int = 1) -> np.ndarray:
    """Gauss-Newton on reprojection error of a single 3D point."""
    X = X.astype(float).copy()
    for _ in range(iters):
        Js, rs = [], []
        for px, pose in observations:
            pc = pose.transform(X)
            z = pc[2]
            if z <= Z_EPS:
                return X
            uv = np.array([k.fx * pc[0] / z + k.cx, k.fy * pc[1] / z + k.cy])
            rs.append(uv - np.asarray(px, dtype=float))
            d_uv = np.array(
                [[k.fx / z, 0.0, -k.fx * pc[0] / z**2], [0.0, k.fy / z, -k.fy * pc[1] / z**2]]
            )
            Js.append(d_uv @ pose.rotation)
        J = np.vstack(Js)
        r = np.concatenate(rs)
        try:
            dX = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError:
            return X
        X = X + dX
    return X


# ---------------------------------------------------------------------------
# pose from 2D-3D correspondences (PnP)


def solve_pose_pnp(correspondences, k: Intrinsics, refine_iters: int = 20):
    """Camera pose from (Point3, Pixel) pairs: DLT on normalised rays,
    orthonormalisation, then Gauss-Newton refinement of reprojection error.

    Returns ``(CameraPose, mean_residual_px)``.
    """
    pts = np.array([c[0] for c in correspondences], dtype=float).reshape(-1, 3)
    pix = np.array([c[1] for c in correspondences], dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 4:
        raise InsufficientDataError(f"insufficient points for PnP ({n} < 4)")
    # collinearity check: rank of centred points must exceed 1
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("PnP points are collinear")

    # DLT on K-normalised coordinates: [R|T] has 12 entries up to scale
    xn = (pix[:, 0] - k.cx) / k.fx
    yn = (pix[:, 1] - k.cy) / k.fy
    A = np.zeros((2 * n, 12))
    A[0::2, 0:3] = pts
    A[0::2, 3] = 1.0
    A[0::2, 8:11] = -xn[:, None] * pts
    A[0::2, 11] = -xn
    A[1::2, 4:7] = pts
    A[1::2, 7] = 1.0
    A[1::2, 8:11] = -yn[:, None] * pts
    A[1::2, 11] = -yn
    _, _, Vt = np.linalg.svd(A)
    M = Vt[-1].reshape(3, 4)
    # cheirality: most points must land in front of the camera
    depths = pts @ M[2, :3] + M[2, 3]
    if np.sum(depths > 0) < n / 2:
        M = -M
    R0 = M[:, :3]
    U, S, Vt2 = np.linalg.svd(R0)
    scale = S.mean()
    R = orthonormalize(R0)
    T = M[:, 3] / scale
    pose = CameraPose(R, T, check=False)
    pose = _refine_pose(pose, pts, pix, k, iters=refine_iters)

    uv, z = project_points(pts, pose, k)
    res = np.linalg.norm(uv - pix, axis=1)
    return pose, float(res.mean())


def _refine_pose(pose: CameraPose, pts, pix, k: Intrinsics, iters: int = 20) -> CameraPose:
    """Gauss-Newton with local so(3) increments: x_cam = exp(w) (R p + T) + t."""
    R = pose.rotation.copy()
    T = pose.translation.copy()
    lam = 1e-6
    prev_cost = None
    for _ in range(iters):
        pc = pts @ R.T + T
        z = pc[:, 2]
        valid = z > Z_EPS
        if not valid.any():
            break
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        r = np.stack([u - pix[:, 0], v - pix[:, 1]], axis=1)[valid].ravel()
        cost = float(r @ r)
        if prev_cost is not None and abs(prev_cost - cost) <= 1e-14 * max(prev_cost, 1.0):
            break
        prev_cost = cost
        J = _pose_jacobian(pc[valid], k)
        H = J.T @ J + lam * np.eye(6)
        g = J.T @ r
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        R = rotation_from_axis_angle(delta[:3]) @ R
        T = rotation_from_axis_angle(delta[:3]) @ T + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break
    return CameraPose(orthonormalize(R), T, check=False)


def _pose_jacobian(pc: np.ndarray, k: Intrinsics) -> np.ndarray:
    """d(u,v)/d(w, t) for the increment x' = exp(w) x + t, stacked (2N, 6)."""
    n = len(pc)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    duv_dx = np.zeros((n, 2, 3))
    duv_dx[:, 0, 0] = k.fx / z
    duv_dx[:, 0, 2] = -k.fx * x / z**2
    duv_dx[:, 1, 1] = k.fy / z
    duv_dx[:, 1, 2] = -k.fy * y / z**2
    dx_dw = np.zeros((n, 3, 3))
    dx_dw[:, 0, 1] = z
    dx_dw[:, 0, 2] = -y
    dx_dw[:, 1, 0] = -z
    dx_dw[:, 1, 2] = x
    dx_dw[:, 2, 0] = y
    dx_dw[:, 2, 1] = -x
    J = np.zeros((n, 2, 6))
    J[:, :, :3] = np.einsum("nij,njk->nik", duv_dx, dx_dw)
    J[:, :, 3:] = duv_dx
    return J.reshape(2 * n, 6)


# ---------------------------------------------------------------------------
# two-view relative pose (essential matrix)


def relative_pose_from_matches(px1: np.ndarray, px2: np.ndarray, k: Intrinsics) -> CameraPose:
    """Pose of view 2 given view 1 at identity, from >= 8 pixel matches.

    Normalised 8-point essential matrix estimate, rank-2 projection, and
    cheirality disambiguation. The returned translation has unit norm.
    """
    p1 = np.asarray(px1, dtype=float).reshape(-1, 2)
    p2 = np.asarray(px2, dtype=float).reshape(-1, 2)
    if len(p1) < 8:
        raise InsufficientDataError(f"need >= 8 matches for essential matrix, got {len(p1)}")
    x1 = np.stack([(p1[:, 0] - k.cx) / k.fx, (p1[:, 1] - k.cy) / k.fy, np.ones(len(p1))], axis=1)
    x2 = np.stack([(p2[:, 0] - k.cx) / k.fx, (p2[:, 1] - k.cy) / k.fy, np.ones(len(p2))], axis=1)
    A = np.einsum("ni,nj->nij", x2, x1).reshape(len(p1), 9)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt

    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            candidates.append(CameraPose(R, t, check=False))

    identity = CameraPose.identity()
    best, best_count = None, -1
    for cand in candidates:
        count = 0
        for a, b in zip(p1, p2):
            try:
                X, _ = triangulate(a, identity, b, cand, k)
            except GeometryError:
                continue
            if identity.transform(X)[2] > 0 and cand.transform(X)[2] > 0:
                count += 1
        if count > best_count:
            best, best_count = cand, count
    if best is None or best_count == 0:
        raise DegenerateGeometryError("no cheirality-consistent relative pose")
    return best


# ---------------------------------------------------------------------------
# gauge helpers


def apply_similarity(scale: float, Q: np.ndarray, d: np.ndarray, pose: CameraPose = None, point: np.ndarray = None):
    """Apply the world similarity ``x' = scale * Q x + d`` to a pose or point.

    Projections are invariant when the same similarity is applied to every
    pose and point of a scene.
    """
    if point is not None:
        return scale * (np.asarray(point, dtype=float) @ Q.T) + d
    R = pose.rotation @ Q.T
    C = scale * (Q @ pose.center()) + d
    return CameraPose(R, -R @ C, check=False)
