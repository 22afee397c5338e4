"""Depth-map ingestion, surface normals, and plane anchoring.

Depth maps arrive from files (16-bit PNG with a scale factor, or float PFM
for lossless round-trips); depth is relative, not metric. Planes are fit in
the camera coordinates of their creation frame and can be lifted to world
coordinates once a camera solve exists.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .errors import DepthError, InsufficientDataError, NonPlanarRegionError
from .geometry import CameraPose, Intrinsics, backproject_pixels
from .media_store import FRAME_FILE, FrameStore

RANSAC_ITERS = 200
RANSAC_INLIER_DEPTH_FRACTION = 0.01  # threshold = 1% of median window depth
MIN_VALID_FRACTION = 0.30
MIN_INLIER_RATIO = 0.50
EXTENT_DEPTH_FRACTION = 0.10


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) float, positive where valid
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "DepthMap":
        values = np.asarray(raw, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0)
        values = np.where(valid, values, 0.0)
        return cls(values=values, valid=valid)


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3) unit vectors on valid pixels
    valid: np.ndarray


@dataclass
class PlaneAnchor:
    id: str
    origin: np.ndarray  # (3,)
    normal: np.ndarray  # (3,) unit, oriented toward the camera at creation
    extent: tuple[float, float]  # half-sizes along the in-plane axes
    frame_index: int
    world_coords: bool = False  # False: camera coords of frame_index

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.normal = np.asarray(self.normal, dtype=float).reshape(3)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-6:
            raise DepthError("anchor normal must be unit length")
        if min(self.extent) <= 0:
            raise DepthError("anchor extent must be positive")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (u, v, n) frame with n = plane normal."""
        n = self.normal
        seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(seed, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v, n

    def to_world(self, pose: CameraPose) -> "PlaneAnchor":
        """Lift a camera-coordinate anchor into world coordinates."""
        if self.world_coords:
            return self
        Rt = pose.rotation.T
        origin_w = Rt @ (self.origin - pose.translation)
        normal_w = Rt @ self.normal
        return PlaneAnchor(
            id=self.id,
            origin=origin_w,
            normal=normal_w / np.linalg.norm(normal_w),
            extent=self.extent,
            frame_index=self.frame_index,
            world_coords=True,
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "origin": [float(x) for x in self.origin],
            "normal": [float(x) for x in self.normal],
            "extent": [float(self.extent[0]), float(self.extent[1])],
            "frame_index": self.frame_index,
            "world_coords": self.world_coords,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneAnchor":
        return cls(
            id=d["id"],
            origin=np.array(d["origin"]),
            normal=np.array(d["normal"]),
            extent=(d["extent"][0], d["extent"][1]),
            frame_index=d["frame_index"],
            world_coords=d.get("world_coords", False),
        )


# ---------------------------------------------------------------------------
# depth file I/O


def depth_path(store: FrameStore, sequence_id: str, frame_index: int, label: str = "original", fmt: str = "png16") -> Path:
    name = FRAME_FILE % frame_index if fmt == "png16" else f"frame_{frame_index:06d}.pfm"
    return store.artifact_dir(sequence_id, "depth", label) / name


def put_depth(
    store: FrameStore,
    sequence_id: str,
    frame_index: int,
    values: np.ndarray,
    label: str = "original",
    fmt: str = "png16",
    scale: float | None = None,
) -> Path:
    """Write a depth map into the sequence layout. For png16 the (lossy)
    quantisation is values / scale rounded to uint16; scale is recorded in
    the sequence manifest."""
    path = depth_path(store, sequence_id, frame_index, label, fmt)
    if fmt == "png16":
        if scale is None:
            scale = max(float(np.max(values)), 1e-12) / 65000.0
        raw = np.clip(np.rint(np.asarray(values, dtype=np.float64) / scale), 0, 65535)
        imgio.write_gray16(path, raw.astype(np.uint16))
        store.set_depth_scale(sequence_id, label, scale)
    elif fmt == "pfm":
        imgio.write_pfm(path, values)
    else:
        raise DepthError(f"unknown depth format {fmt!r}")
    return path


def load_depth(
    store: FrameStore,
    sequence_id: str,
    frame_index: int,
    source=None,
    label: str = "original",
    scale: float | None = None,
) -> DepthMap:
    """Load a depth map registered to a frame of the sequence.

    ``source`` defaults to the stored layout path. Non-positive and NaN
    entries are masked invalid. Dimensions must match the frame rung.
    """
    seq = store.sequence(sequence_id)
    if not 0 <= frame_index < seq.frame_count:
        raise DepthError(f"frame index {frame_index} out of range")
    if source is None:
        source = depth_path(store, sequence_id, frame_index, label)
        if not Path(source).exists():
            source = depth_path(store, sequence_id, frame_index, label, fmt="pfm")
    source = Path(source)
    if not source.exists():
        raise DepthError(f"depth file {source} does not exist")

    if source.suffix.lower() == ".pfm":
        values = imgio.read_pfm(source).astype(np.float64)
    else:
        raw = imgio.read_gray16(source).astype(np.float64)
        if scale is None:
            scale = store.depth_scale(sequence_id, label)
        if scale is None:
            raise DepthError("16-bit depth requires a scale (argument or manifest)")
        values = raw * scale

    entry = seq.ladder_entry(label)
    w, h = (seq.width, seq.height) if entry.skipped else (entry.width, entry.height)
    if values.shape != (h, w):
        raise DepthError(
            f"depth dimensions {values.shape[1]}x{values.shape[0]} do not match frame {w}x{h}"
        )
    return DepthMap.from_raw(values)


# ---------------------------------------------------------------------------
# normals


def normals_from_depth(depth: DepthMap, k: Intrinsics) -> NormalMap:
    """Per-pixel normals from central differences of back-projected points.

    Differencing back-projected 3D points (not raw depth) keeps the result
    consistent with the intrinsics. Normals are unit length and oriented
    toward the camera (n . p < 0). Pixels whose 4-neighbourhood is not fully
    valid (borders included) are invalid.
    """
    h, w = depth.shape
    vs, us = np.mgrid[0:h, 0:w]
    pts = backproject_pixels(us, vs, depth.values, k)  # camera coords

    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 1:-1] = (pts[:, 2:] - pts[:, :-2]) / 2.0
    dv[1:-1, :] = (pts[2:, :] - pts[:-2, :]) / 2.0

    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=2)

    valid = depth.valid.copy()
    ok = np.zeros_like(valid)
    ok[1:-1, 1:-1] = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    ok &= norm > 1e-15

    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[:, :, None]
    # orient toward the camera at the origin
    flip = np.einsum("ijc,ijc->ij", n, pts) > 0
    n[flip] = -n[flip]
    n[~ok] = 0.0
    return NormalMap(normals=n, valid=ok)


# ---------------------------------------------------------------------------
# plane anchoring


def anchor_plane(
    click,
    depth: DepthMap,
    k: Intrinsics,
    window_radius: int = 15,
    frame_index: int = 0,
    seed: int = 0,
    anchor_id: str | None = None,
) -> PlaneAnchor:
    """Fit an oriented plane under a clicked pixel.

    Back-projects the valid pixels of the (2r+1)^2 window, runs RANSAC with
    an inlier threshold of 1% of the median window depth, refits on inliers,
    and snaps the back-projected click onto the plane. The result lives in
    the camera coordinates of the clicked frame.
    """
    h, w = depth.shape
    cu, cv = int(round(click[0])), int(round(click[1]))
    if not (0 <= cu < w and 0 <= cv < h):
        raise DepthError(f"click ({cu}, {cv}) outside image bounds")
    r = int(window_radius)
    u0, u1 = max(0, cu - r), min(w, cu + r + 1)
    v0, v1 = max(0, cv - r), min(h, cv + r + 1)

    sub_valid = depth.valid[v0:v1, u0:u1]
    window_size = (u1 - u0) * (v1 - v0)
    n_valid = int(sub_valid.sum())
    if n_valid < MIN_VALID_FRACTION * window_size:
        raise InsufficientDataError(
            f"only {n_valid}/{window_size} valid depth pixels under the click window"
        )

    vs, us = np.nonzero(sub_valid)
    us = us + u0
    vs = vs + v0
    zs = depth.values[vs, us]
    pts = backproject_pixels(us, vs, zs, k)
    median_depth = float(np.median(zs))
    inlier_tol = RANSAC_INLIER_DEPTH_FRACTION * median_depth

    rng = np.random.default_rng(seed)
    best_inliers = None
    best_count = -1
    n = len(pts)
    for _ in range(RANSAC_ITERS):
        idx = rng.choice(n, 3, replace=False)
        p0, p1, p2 = pts[idx]
        nv = np.cross(p1 - p0, p2 - p0)
        nn = np.linalg.norm(nv)
        if nn < 1e-12:
            continue
        nv = nv / nn
        dist = np.abs((pts - p0) @ nv)
        inliers = dist <= inlier_tol
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count / n < MIN_INLIER_RATIO:
        raise NonPlanarRegionError(
            f"non-planar region: best RANSAC inlier ratio {best_count / n:.2f} < {MIN_INLIER_RATIO}"
        )

    # iterate (refit, reselect inliers) until the consensus set stabilises
    normal, point = _fit_plane_lsq(pts[best_inliers])
    for _ in range(3):
        dist = np.abs((pts - point) @ normal)
        inliers = dist <= inlier_tol
        if inliers.sum() < 3:
            break
        normal, point = _fit_plane_lsq(pts[inliers])

    if normal @ point > 0:
        normal = -normal

    if depth.valid[cv, cu]:
        click_pt = backproject_pixels(
            np.array([float(click[0])]), np.array([float(click[1])]), np.array([depth.values[cv, cu]]), k
        )[0]
        origin = click_pt - ((click_pt - point) @ normal) * normal
    else:
        # invalid click depth: intersect the viewing ray with the plane
        ray = np.array([(click[0] - k.cx) / k.fx, (click[1] - k.cy) / k.fy, 1.0])
        denom = ray @ normal
        if abs(denom) < 1e-12:
            raise NonPlanarRegionError("viewing ray parallel to fitted plane")
        t = (point @ normal) / denom
        if t <= 0:
            raise NonPlanarRegionError("fitted plane behind the camera")
        origin = t * ray

    extent = EXTENT_DEPTH_FRACTION * median_depth
    return PlaneAnchor(
        id=anchor_id or ("anchor-" + uuid.uuid4().hex[:8]),
        origin=origin,
        normal=normal,
        extent=(extent, extent),
        frame_index=frame_index,
        world_coords=False,
    )


def _fit_plane_lsq(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total least squares plane: smallest principal axis of the point cloud."""
    centroid = pts.mean(axis=0)
    q = pts - centroid
    _, _, Vt = np.linalg.svd(q, full_matrices=False)
    normal = Vt[-1]
    return normal / np.linalg.norm(normal), centroid
