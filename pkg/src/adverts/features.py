"""Feature detection, description, and matching for camera tracking.

Detector: multi-scale Harris corners (scale-normalised response, spatial +
scale local maxima, quadratic subpixel refinement). Corners rather than
blobs because manual track points land on object corners and checkerboard-
style junctions, where blob detectors are blind.

Descriptor: 128-d gradient-orientation histograms (4x4 spatial cells x 8
orientation bins) on a scale- and orientation-normalised patch, L2
normalised with the usual 0.2 clamp.

Matching: nearest neighbour with Lowe ratio test and mutual-best check.
Everything is deterministic for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DETECT_SCALES = (1.2, 1.7, 2.4, 3.4, 4.8)  # integration scales sigma_i
DERIV_FACTOR = 0.7  # sigma_d = DERIV_FACTOR * sigma_i
HARRIS_KAPPA = 0.05
RESPONSE_FLOOR = 1e-7  # absolute floor (image normalised to [0, 1])
RELATIVE_THRESH = 0.005  # fraction of the strongest response
MAX_FEATURES = 2000
RATIO_TEST = 0.75

N_ORI_BINS = 36
DESC_CELLS = 4
DESC_ORI_BINS = 8
DESC_CLAMP = 0.2


@dataclass(eq=False)
class FeatureSet:
    frame_index: int
    keypoints: np.ndarray  # (N, 4): u, v, scale sigma, orientation rad
    descriptors: np.ndarray  # (N, 128) float32

    def __len__(self):
        return len(self.keypoints)


def to_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3:
        f = 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]
    if f.max() > 1.5:
        f = f / 255.0
    return f


def detect_features(frame: np.ndarray, frame_index: int = 0, max_features: int = MAX_FEATURES) -> FeatureSet:
    """Detect multi-scale Harris corners and compute descriptors.

    Constant (or nearly constant) frames yield an empty set.
    """
    gray = to_gray(frame)
    h, w = gray.shape
    empty = FeatureSet(
        frame_index=frame_index,
        keypoints=np.zeros((0, 4)),
        descriptors=np.zeros((0, DESC_CELLS * DESC_CELLS * DESC_ORI_BINS), dtype=np.float32),
    )
    if gray.std() < 1e-6 or min(h, w) < 16:
        return empty

    responses = []
    grads = []
    for sigma_i in DETECT_SCALES:
        sigma_d = DERIV_FACTOR * sigma_i
        ix = ndimage.gaussian_filter(gray, sigma_d, order=(0, 1))
        iy = ndimage.gaussian_filter(gray, sigma_d, order=(1, 0))
        a = ndimage.gaussian_filter(ix * ix, sigma_i)
        b = ndimage.gaussian_filter(iy * iy, sigma_i)
        c = ndimage.gaussian_filter(ix * iy, sigma_i)
        r = sigma_d**4 * (a * b - c * c - HARRIS_KAPPA * (a + b) ** 2)
        responses.append(r)
        grads.append((ix, iy))
    resp = np.stack(responses)  # (S, H, W)

    peak = resp.max()
    if peak <= RESPONSE_FLOOR:
        return empty
    thresh = max(RESPONSE_FLOOR, RELATIVE_THRESH * peak)

    # spatial 3x3 maxima per scale, then maxima across neighbouring scales
    spatial_max = ndimage.maximum_filter(resp, size=(1, 3, 3), mode="nearest")
    scale_max = ndimage.maximum_filter(resp, size=(3, 1, 1), mode="nearest")
    is_peak = (resp >= spatial_max) & (resp >= scale_max) & (resp > thresh)
    # exclude the image border where descriptors would fall outside
    margin = 8
    is_peak[:, :margin, :] = False
    is_peak[:, -margin:, :] = False
    is_peak[:, :, :margin] = False
    is_peak[:, :, -margin:] = False

    ss, vs, us = np.nonzero(is_peak)
    if len(ss) == 0:
        return empty
    strengths = resp[ss, vs, us]
    order = np.lexsort((us, vs, ss, -strengths))
    ss, vs, us = ss[order][:max_features], vs[order][:max_features], us[order][:max_features]

    keypoints = []
    descriptors = []
    for s_idx, v, u in zip(ss, vs, us):
        du, dv = _subpixel_offset(resp[s_idx], v, u)
        sigma = DETECT_SCALES[s_idx]
        ix, iy = grads[s_idx]
        theta = _dominant_orientation(ix, iy, u + du, v + dv, sigma)
        desc = _descriptor(ix, iy, u + du, v + dv, sigma, theta)
        if desc is None:
            continue
        keypoints.append((u + du, v + dv, sigma, theta))
        descriptors.append(desc)
    if not keypoints:
        return empty
    return FeatureSet(
        frame_index=frame_index,
        keypoints=np.array(keypoints, dtype=np.float64),
        descriptors=np.array(descriptors, dtype=np.float32),
    )


def _subpixel_offset(r: np.ndarray, v: int, u: int) -> tuple[float, float]:
    """Quadratic peak interpolation, clamped to half a pixel."""
    h, w = r.shape
    if not (1 <= v < h - 1 and 1 <= u < w - 1):
        return 0.0, 0.0
    dx = (r[v, u + 1] - r[v, u - 1]) / 2.0
    dy = (r[v + 1, u] - r[v - 1, u]) / 2.0
    dxx = r[v, u + 1] - 2 * r[v, u] + r[v, u - 1]
    dyy = r[v + 1, u] - 2 * r[v, u] + r[v - 1, u]
    du = -dx / dxx if dxx < 0 else 0.0
    dv = -dy / dyy if dyy < 0 else 0.0
    return float(np.clip(du, -0.5, 0.5)), float(np.clip(dv, -0.5, 0.5))


def _bilinear(img: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    u0 = np.clip(np.floor(us).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(vs).astype(np.int64), 0, h - 2)
    fu = np.clip(us - u0, 0.0, 1.0)
    fv = np.clip(vs - v0, 0.0, 1.0)
    return (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u0 + 1] * fu * (1 - fv)
        + img[v0 + 1, u0] * (1 - fu) * fv
        + img[v0 + 1, u0 + 1] * fu * fv
    )


def _dominant_orientation(ix, iy, u: float, v: float, sigma: float) -> float:
    """Peak of the Gaussian-weighted gradient-orientation histogram."""
    r = max(int(round(3 * sigma)), 3)
    offs = np.arange(-r, r + 1, dtype=np.float64)
    uu, vv = np.meshgrid(u + offs, v + offs)
    gx = _bilinear(ix, uu.ravel(), vv.ravel())
    gy = _bilinear(iy, uu.ravel(), vv.ravel())
    mag = np.hypot(gx, gy)
    wgt = np.exp(-((uu - u) ** 2 + (vv - v) ** 2).ravel() / (2 * (1.5 * sigma) ** 2))
    ang = np.arctan2(gy, gx) % (2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * N_ORI_BINS).astype(np.int64), N_ORI_BINS - 1)
    hist = np.bincount(bins, weights=mag * wgt, minlength=N_ORI_BINS)
    # light circular smoothing stabilises the peak
    hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    k = int(np.argmax(hist))
    lo, hi = hist[(k - 1) % N_ORI_BINS], hist[(k + 1) % N_ORI_BINS]
    denom = hist[k] * 2 - lo - hi
    shift = 0.5 * (hi - lo) / denom if denom > 0 else 0.0
    return ((k + 0.5 + shift) / N_ORI_BINS) * 2 * np.pi


def _descriptor(ix, iy, u: float, v: float, sigma: float, theta: float):
    """4x4x8 gradient histogram on a rotated, sigma-scaled 16x16 sample grid."""
    n = 4 * DESC_CELLS  # 16 samples per axis
    half = (n - 1) / 2.0
    step = 0.75 * sigma
    coords = (np.arange(n) - half) * step
    xs, ys = np.meshgrid(coords, coords)
    ct, st = np.cos(theta), np.sin(theta)
    su = u + ct * xs - st * ys
    sv = v + st * xs + ct * ys
    h, w = ix.shape
    if su.min() < 0 or sv.min() < 0 or su.max() > w - 1 or sv.max() > h - 1:
        return None
    gx = _bilinear(ix, su.ravel(), sv.ravel())
    gy = _bilinear(iy, su.ravel(), sv.ravel())
    mag = np.hypot(gx, gy)
    wgt = np.exp(-(xs.ravel() ** 2 + ys.ravel() ** 2) / (2 * (half * step) ** 2))
    ang = (np.arctan2(gy, gx) - theta) % (2 * np.pi)

    cell_x = (xs.ravel() / step + half) / 4.0  # in [0, 4)
    cell_y = (ys.ravel() / step + half) / 4.0
    ori = ang / (2 * np.pi) * DESC_ORI_BINS

    hist = np.zeros((DESC_CELLS, DESC_CELLS, DESC_ORI_BINS))
    cx0 = np.floor(cell_x - 0.5).astype(np.int64)
    cy0 = np.floor(cell_y - 0.5).astype(np.int64)
    o0 = np.floor(ori).astype(np.int64)
    fx = cell_x - 0.5 - cx0
    fy = cell_y - 0.5 - cy0
    fo = ori - o0
    wm = mag * wgt
    for dy_ in (0, 1):
        for dx_ in (0, 1):
            for do_ in (0, 1):
                cy = cy0 + dy_
                cx = cx0 + dx_
                oo = (o0 + do_) % DESC_ORI_BINS
                ok = (cy >= 0) & (cy < DESC_CELLS) & (cx >= 0) & (cx < DESC_CELLS)
                wgt3 = (
                    wm
                    * (fy if dy_ else 1 - fy)
                    * (fx if dx_ else 1 - fx)
                    * (fo if do_ else 1 - fo)
                )
                np.add.at(hist, (cy[ok], cx[ok], oo[ok]), wgt3[ok])
    vec = hist.ravel()
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    vec = np.minimum(vec / norm, DESC_CLAMP)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    return (vec / norm).astype(np.float32)


def match_features(a: FeatureSet, b: FeatureSet, ratio: float = RATIO_TEST):
    """Mutual-best nearest-neighbour matches passing the Lowe ratio test.

    Returns a list of (index_a, index_b, distance), no duplicate indices on
    either side. Empty inputs produce an empty list.
    """
    if len(a) == 0 or len(b) == 0:
        return []
    da = a.descriptors.astype(np.float64)
    db = b.descriptors.astype(np.float64)
    # squared euclidean distances via the dot-product expansion
    d2 = np.maximum(
        (da * da).sum(axis=1)[:, None] + (db * db).sum(axis=1)[None, :] - 2.0 * da @ db.T, 0.0
    )
    best_b = np.argmin(d2, axis=1)
    matches = []
    if d2.shape[1] >= 2:
        part = np.partition(d2, 1, axis=1)
        nn1, nn2 = part[:, 0], part[:, 1]
    else:
        nn1 = d2[:, 0]
        nn2 = np.full(len(da), np.inf)
    best_a_for_b = np.argmin(d2, axis=0)
    for i in range(len(da)):
        j = best_b[i]
        if best_a_for_b[j] != i:
            continue  # not mutual best
        if nn2[i] > 0 and np.sqrt(nn1[i]) > ratio * np.sqrt(nn2[i]):
            continue  # fails the ratio test
        matches.append((int(i), int(j), float(np.sqrt(d2[i, j]))))
    return matches
