"""Alpha matting: trimap generation, background reconstruction, and the
background-aware closed-form solve of the compositing equation
I = alpha * F + (1 - alpha) * B.

Given the background plate B and a foreground colour estimate F, the least
squares alpha per pixel is ((I - B) . (F - B)) / |F - B|^2, clamped to
[0, 1]. All colour math runs in float [0, 1]; 8-bit output uses banker's
rounding so artifacts are checkpoint-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import MattingError
from .geometry import CameraPose, Intrinsics, pixel_ray, project_points
from .imgio import round_half_even_u8

TRIMAP_BG = 0
TRIMAP_UNKNOWN = 1
TRIMAP_FG = 2

DEGENERATE_EPS = 2.0 / 255.0  # |F - B| below this triggers the fallback path
N_FOREGROUND_SAMPLES = 8
DEFAULT_BAND_RADIUS = 5


@dataclass(eq=False)
class Trimap:
    labels: np.ndarray  # uint8 (H, W) of TRIMAP_* codes

    @property
    def fg(self):
        return self.labels == TRIMAP_FG

    @property
    def bg(self):
        return self.labels == TRIMAP_BG

    @property
    def unknown(self):
        return self.labels == TRIMAP_UNKNOWN

    def to_png_gray(self) -> np.ndarray:
        out = np.zeros(self.labels.shape, dtype=np.uint8)
        out[self.unknown] = 128
        out[self.fg] = 255
        return out


@dataclass(eq=False)
class AlphaMatte:
    alpha: np.ndarray  # float64 (H, W) in [0, 1]
    fallback: np.ndarray | None = None  # pixels solved by neighbourhood smoothing

    def to_png_gray(self) -> np.ndarray:
        return round_half_even_u8(self.alpha * 255.0)

    @classmethod
    def from_png_gray(cls, gray: np.ndarray) -> "AlphaMatte":
        return cls(alpha=gray.astype(np.float64) / 255.0)


@dataclass(eq=False)
class BackgroundPlate:
    pixels: np.ndarray  # uint8 (H, W, 3)
    confidence: np.ndarray  # float (H, W) in [0, 1]


@dataclass(eq=False)
class ForegroundEstimate:
    pixels: np.ndarray  # float (H, W, 3) in [0, 1]; meaningful on unknown+fg
    computed: np.ndarray  # bool (H, W)


# ---------------------------------------------------------------------------
# trimap


def make_trimap(mask: np.ndarray, band_radius: float = DEFAULT_BAND_RADIUS) -> Trimap:
    """Erode/dilate a binary mask into {fg, unknown, bg} by Euclidean
    distance: fg keeps pixels deeper than ``band_radius`` inside the mask,
    bg keeps pixels farther than ``band_radius`` from it."""
    if band_radius < 0:
        raise MattingError("band_radius must be >= 0")
    m = np.asarray(mask, dtype=bool)
    labels = np.full(m.shape, TRIMAP_UNKNOWN, dtype=np.uint8)
    if not m.any():
        labels[:] = TRIMAP_BG
        return Trimap(labels)
    if m.all():
        labels[:] = TRIMAP_FG
        return Trimap(labels)
    dist_inside = ndimage.distance_transform_edt(m)
    dist_outside = ndimage.distance_transform_edt(~m)
    labels[m & (dist_inside > band_radius)] = TRIMAP_FG
    labels[~m & (dist_outside > band_radius)] = TRIMAP_BG
    return Trimap(labels)


# ---------------------------------------------------------------------------
# background reconstruction


def reconstruct_background(
    frames: list[np.ndarray],
    masks: list[np.ndarray | None],
    poses: list[CameraPose] | None = None,
    k: Intrinsics | None = None,
    anchor=None,
) -> list[BackgroundPlate]:
    """Occluder-free plate per frame.

    Static camera (no poses): per-pixel temporal median over the frames where
    the pixel is unmasked; confidence is the fraction of contributing frames.
    Moving camera: sources are rewarped into the target view through the
    anchor-plane homography first; pixels outside the plane footprint get
    confidence 0.

    Pixels never unoccluded anywhere get confidence 0 and are inpainted from
    their neighbours.
    """
    if len(frames) != len(masks):
        raise MattingError("need one mask entry (possibly None) per frame")
    n = len(frames)
    if n == 0:
        raise MattingError("no frames")
    if poses is not None:
        if k is None or anchor is None:
            raise MattingError("moving-camera reconstruction needs intrinsics and a plane anchor")
        return [
            _plate_for_target(frames, masks, poses, k, anchor, t) for t in range(n)
        ]

    stack = np.stack([f.astype(np.float64) for f in frames])
    occluded = np.stack(
        [np.zeros(frames[0].shape[:2], dtype=bool) if m is None else np.asarray(m, dtype=bool) for m in masks]
    )
    plate = _median_plate(stack, occluded)
    return [plate] * n


def _median_plate(stack: np.ndarray, occluded: np.ndarray) -> BackgroundPlate:
    n = stack.shape[0]
    visible = ~occluded
    counts = visible.sum(axis=0)
    masked = np.ma.masked_array(stack, mask=np.broadcast_to(occluded[:, :, :, None], stack.shape))
    med = np.ma.median(masked, axis=0).filled(0.0)
    confidence = counts / float(n)
    never = counts == 0
    if never.any():
        med = _inpaint(med, ~never)
        confidence[never] = 0.0
    return BackgroundPlate(pixels=round_half_even_u8(med), confidence=confidence)


def _inpaint(img: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown pixels by iterative dilation with the mean of known
    neighbours; coarse but only used for never-visible pixels."""
    out = img.copy()
    known = known.copy()
    kernel = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=np.float64)
    for _ in range(max(img.shape[:2])):
        if known.all():
            break
        counts = ndimage.convolve(known.astype(np.float64), kernel, mode="constant")
        frontier = ~known & (counts > 0)
        if not frontier.any():
            break
        for c in range(out.shape[2]):
            sums = ndimage.convolve(np.where(known, out[:, :, c], 0.0), kernel, mode="constant")
            out[frontier, c] = sums[frontier] / counts[frontier]
        known |= frontier
    return out


def _plate_for_target(frames, masks, poses, k, anchor, target: int) -> BackgroundPlate:
    h, w = frames[0].shape[:2]
    anchor_w = anchor if anchor.world_coords else anchor.to_world(poses[anchor.frame_index])
    u_ax, v_ax, n_ax = anchor_w.basis()
    origin = anchor_w.origin

    # intersect target-view rays with the anchor plane
    vs, us = np.mgrid[0:h, 0:w]
    pose_t = poses[target]
    Rt = pose_t.rotation.T
    cam_center = pose_t.center()
    dirs = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones((h, w))], axis=-1
    ) @ Rt.T
    denom = dirs @ n_ax
    num = (origin - cam_center) @ n_ax
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ray = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    pts = cam_center + dirs * t_ray[:, :, None]
    rel = pts - origin
    in_footprint = (
        (t_ray > 0)
        & np.isfinite(t_ray)
        & (np.abs(rel @ u_ax) <= anchor_w.extent[0])
        & (np.abs(rel @ v_ax) <= anchor_w.extent[1])
    )

    samples = np.zeros((len(frames), h, w, 3))
    occluded = np.ones((len(frames), h, w), dtype=bool)
    flat_pts = pts.reshape(-1, 3)
    for s, (frame, mask) in enumerate(zip(frames, masks)):
        uv, z = project_points(flat_pts, poses[s], k)
        uu = np.rint(uv[:, 0]).astype(np.int64).reshape(h, w)
        vv = np.rint(uv[:, 1]).astype(np.int64).reshape(h, w)
        ok = in_footprint & (z.reshape(h, w) > 0) & (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        m = np.zeros((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        src_occ = np.ones((h, w), dtype=bool)
        src_occ[ok] = m[vv[ok], uu[ok]]
        samples[s][ok] = frame.astype(np.float64)[vv[ok], uu[ok]]
        occluded[s] = src_occ
    plate = _median_plate(samples, occluded)
    plate.confidence[~in_footprint] = 0.0
    return plate


# ---------------------------------------------------------------------------
# alpha solving


def solve_alpha(image: np.ndarray, plate: BackgroundPlate, trimap: Trimap):
    """Background-aware matting: alpha = 1 on trimap-fg, 0 on trimap-bg;
    unknown pixels get the least-squares solution of the compositing
    equation using the plate and a foreground colour estimated from the
    nearest trimap-foreground samples (inverse-distance weighted).

    Returns (AlphaMatte, ForegroundEstimate).
    """
    img = np.asarray(image, dtype=np.float64) / 255.0
    bg = plate.pixels.astype(np.float64) / 255.0
    if img.shape != bg.shape or img.shape[:2] != trimap.labels.shape:
        raise MattingError("image / plate / trimap dimensions disagree")
    h, w = trimap.labels.shape

    alpha = np.zeros((h, w))
    alpha[trimap.fg] = 1.0
    unknown = trimap.unknown
    f_est = np.zeros((h, w, 3))
    f_computed = np.zeros((h, w), dtype=bool)
    fallback = np.zeros((h, w), dtype=bool)

    if unknown.any():
        if not (plate.confidence[unknown] > 0).any():
            raise MattingError("background unavailable across the unknown region")
        fy, fx = np.nonzero(trimap.fg)
        uy, ux = np.nonzero(unknown)
        if len(fy) == 0:
            # no foreground anywhere: unknown band resolves to background
            fallback[unknown] = True
            alpha[unknown] = 0.0
        else:
            tree = cKDTree(np.stack([fy, fx], axis=1))
            kq = min(N_FOREGROUND_SAMPLES, len(fy))
            dist, idx = tree.query(np.stack([uy, ux], axis=1), k=kq)
            dist = dist.reshape(len(uy), kq)
            idx = idx.reshape(len(uy), kq)
            wgt = 1.0 / (dist + 1.0)
            wgt /= wgt.sum(axis=1, keepdims=True)
            fg_colors = img[fy[idx], fx[idx]]  # (n_unknown, kq, 3)
            F = (fg_colors * wgt[:, :, None]).sum(axis=1)
            f_est[uy, ux] = F
            f_computed[uy, ux] = True

            B = bg[uy, ux]
            I = img[uy, ux]
            diff = F - B
            denom = (diff * diff).sum(axis=1)
            ok = (np.sqrt(denom) >= DEGENERATE_EPS) & (plate.confidence[uy, ux] > 0)
            a = np.zeros(len(uy))
            a[ok] = np.clip(((I[ok] - B[ok]) * diff[ok]).sum(axis=1) / denom[ok], 0.0, 1.0)
            alpha[uy, ux] = a
            bad = ~ok
            fallback[uy[bad], ux[bad]] = True

        if fallback.any():
            alpha = _smooth_fill(alpha, fallback, trimap)

    f_est[trimap.fg] = img[trimap.fg]
    f_computed |= trimap.fg
    return AlphaMatte(alpha=alpha, fallback=fallback), ForegroundEstimate(pixels=f_est, computed=f_computed)


def _smooth_fill(alpha: np.ndarray, holes: np.ndarray, trimap: Trimap) -> np.ndarray:
    """Replace hole pixels by the mean alpha of their non-hole neighbourhood,
    growing the window until every hole sees at least one valid pixel."""
    out = alpha.copy()
    valid = ~holes
    kernel = np.ones((3, 3))
    filled = valid.copy()
    vals = np.where(valid, alpha, 0.0)
    for _ in range(max(alpha.shape)):
        if filled.all():
            break
        counts = ndimage.convolve(filled.astype(np.float64), kernel, mode="constant")
        sums = ndimage.convolve(np.where(filled, vals, 0.0), kernel, mode="constant")
        frontier = ~filled & (counts > 0)
        if not frontier.any():
            break
        vals[frontier] = sums[frontier] / counts[frontier]
        filled |= frontier
    out[holes] = np.clip(vals[holes], 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# compositing


def composite(fg: np.ndarray, alpha, bg: np.ndarray) -> np.ndarray:
    """Per-pixel compositing: out = alpha * fg + (1 - alpha) * bg, computed
    in float and rounded half-to-even at 8 bits."""
    fgf = np.asarray(fg, dtype=np.float64)
    bgf = np.asarray(bg, dtype=np.float64)
    if fgf.shape != bgf.shape:
        raise MattingError(f"fg {fgf.shape} and bg {bgf.shape} dimensions disagree")
    a = alpha.alpha if isinstance(alpha, AlphaMatte) else np.asarray(alpha, dtype=np.float64)
    if a.ndim == fgf.ndim - 1:
        a = a[..., None]
    out = a * fgf + (1.0 - a) * bgf
    return round_half_even_u8(out)
