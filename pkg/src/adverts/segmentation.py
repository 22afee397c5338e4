"""Interactive occlusion-mask segmentation and mask propagation.

Round-based contract: each interactive round takes the frame, the mask from
the previous round (optional), and two binary user annotation maps for
foreground/background. Propagation takes a frame, the previous round's mask
(optional) and the previous frame's mask. Scribbles from every round are
kept as hard constraints, so corrections accumulate.

Masks come from a graph cut on the 4-connected pixel grid: colour-histogram
unaries, contrast-sensitive smoothness, scribbles as hard constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import SegmentationError
from .maxflow import solve_grid_cut

HARD_COST = 1e9
HIST_BITS = 5  # 32 bins per channel
PROB_FLOOR = 1e-8
SMOOTHNESS_LAMBDA = 50.0
PREV_MASK_WEIGHT = 0.25  # weight of previous-round pixels in colour models
HARD_BAND = 3  # px: erosion/dilation depth for propagation hard constraints
BLOCK_SIZE = 8
SEARCH_RADIUS = 10
INLIER_TOL_PX = 2.0


@dataclass(eq=False)
class Scribbles:
    fg: np.ndarray  # bool (H, W)
    bg: np.ndarray  # bool (H, W)

    def __post_init__(self):
        self.fg = np.asarray(self.fg, dtype=bool)
        self.bg = np.asarray(self.bg, dtype=bool)
        if self.fg.shape != self.bg.shape:
            raise SegmentationError("fg/bg annotation maps must share dimensions")

    @property
    def empty(self) -> bool:
        return not (self.fg.any() or self.bg.any())


@dataclass(eq=False)
class Mask:
    pixels: np.ndarray  # bool (H, W)
    frame_index: int = 0
    object_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=bool)

    @property
    def empty(self) -> bool:
        return not self.pixels.any()


@dataclass
class PropagationResult:
    mask: Mask
    confidence: float  # inlier fraction of the displacement field
    lost: bool = False  # object left the frame (or propagation continued past a loss)


# ---------------------------------------------------------------------------
# run-length encoding for scribble transport (UI -> service)


def encode_rle(bitmap: np.ndarray) -> dict:
    flat = np.asarray(bitmap, dtype=bool).ravel()
    h, w = bitmap.shape
    runs: list[int] = []
    diff = np.diff(flat.astype(np.int8))
    starts = list(np.nonzero(diff == 1)[0] + 1)
    ends = list(np.nonzero(diff == -1)[0] + 1)
    if flat.size and flat[0]:
        starts.insert(0, 0)
    if flat.size and flat[-1]:
        ends.append(flat.size)
    for s, e in zip(starts, ends):
        runs.extend((int(s), int(e - s)))
    return {"width": w, "height": h, "runs": runs}


def decode_rle(doc: dict) -> np.ndarray:
    w, h = doc["width"], doc["height"]
    flat = np.zeros(w * h, dtype=bool)
    runs = doc["runs"]
    for i in range(0, len(runs), 2):
        s, ln = runs[i], runs[i + 1]
        if s < 0 or s + ln > flat.size:
            raise SegmentationError("RLE run outside bitmap bounds")
        flat[s : s + ln] = True
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# energy model


@dataclass
class GridEnergy:
    """Pixel-labeling energy: unary fg/bg costs plus contrast-sensitive
    4-neighbour smoothness. ``solve`` returns the global minimum cut."""

    cost_fg: np.ndarray  # (H, W) cost of labeling a pixel foreground
    cost_bg: np.ndarray
    w_right: np.ndarray  # (H, W-1)
    w_down: np.ndarray  # (H-1, W)

    def energy(self, labels: np.ndarray) -> float:
        lab = np.asarray(labels, dtype=bool)
        e = float(self.cost_fg[lab].sum() + self.cost_bg[~lab].sum())
        e += float(self.w_right[lab[:, :-1] != lab[:, 1:]].sum())
        e += float(self.w_down[lab[:-1, :] != lab[1:, :]].sum())
        return e

    def solve(self) -> np.ndarray:
        _, labels = solve_grid_cut(self.cost_bg, self.cost_fg, self.w_right, self.w_down)
        return labels


def _color_bins(frame: np.ndarray) -> np.ndarray:
    f = frame.astype(np.uint16)
    return (f[..., 0] >> (8 - HIST_BITS) << (2 * HIST_BITS)) | (
        f[..., 1] >> (8 - HIST_BITS) << HIST_BITS
    ) | (f[..., 2] >> (8 - HIST_BITS))


def _histogram(bins: np.ndarray, where: np.ndarray, weight: float = 1.0) -> np.ndarray:
    n_bins = 1 << (3 * HIST_BITS)
    if not where.any():
        return np.zeros(n_bins)
    return weight * np.bincount(bins[where].ravel(), minlength=n_bins).astype(np.float64)


def _unary_from_hist(hist: np.ndarray, bins: np.ndarray) -> np.ndarray:
    total = hist.sum()
    if total <= 0:
        # no samples: uninformative model
        p = np.full(hist.shape, 1.0 / hist.size)
    else:
        p = hist / total
    return -np.log(p[bins] + PROB_FLOOR)


def contrast_weights(frame: np.ndarray, lam: float = SMOOTHNESS_LAMBDA):
    """w = lam * exp(-|dI|^2 / (2 beta)), beta = mean squared neighbour
    difference over the frame. Constant frames get uniform weights."""
    f = frame.astype(np.float64)
    d_right = ((f[:, 1:] - f[:, :-1]) ** 2).sum(axis=2)
    d_down = ((f[1:, :] - f[:-1, :]) ** 2).sum(axis=2)
    n = d_right.size + d_down.size
    beta = (d_right.sum() + d_down.sum()) / max(n, 1)
    if beta <= 0:
        return np.full(d_right.shape, lam), np.full(d_down.shape, lam)
    return lam * np.exp(-d_right / (2 * beta)), lam * np.exp(-d_down / (2 * beta))


def build_interactive_energy(
    frame: np.ndarray,
    prev_mask: Mask | None,
    scribbles: Scribbles,
    lam: float = SMOOTHNESS_LAMBDA,
) -> GridEnergy:
    bins = _color_bins(frame)
    fg_hist = _histogram(bins, scribbles.fg)
    bg_hist = _histogram(bins, scribbles.bg)
    if prev_mask is not None:
        fg_hist += _histogram(bins, prev_mask.pixels, PREV_MASK_WEIGHT)
        bg_hist += _histogram(bins, ~prev_mask.pixels, PREV_MASK_WEIGHT)

    cost_fg = _unary_from_hist(fg_hist, bins)
    cost_bg = _unary_from_hist(bg_hist, bins)

    # scribbled pixels are hard-constrained
    cost_fg[scribbles.fg] = 0.0
    cost_bg[scribbles.fg] = HARD_COST
    cost_bg[scribbles.bg] = 0.0
    cost_fg[scribbles.bg] = HARD_COST

    w_right, w_down = contrast_weights(frame, lam)
    return GridEnergy(cost_fg, cost_bg, w_right, w_down)


def segment_interactive(
    frame: np.ndarray,
    prev_mask: Mask | None,
    scribbles: Scribbles,
    frame_index: int = 0,
    object_id: str = "",
    lam: float = SMOOTHNESS_LAMBDA,
) -> Mask:
    """One interactive round: graph cut with scribbles as hard constraints
    and colour models from the scribbled pixels (previous-round mask pixels
    contribute at reduced weight)."""
    frame = np.asarray(frame, dtype=np.uint8)
    if scribbles.fg.shape != frame.shape[:2]:
        raise SegmentationError("annotation maps must match frame dimensions")
    if (scribbles.fg & scribbles.bg).any():
        raise SegmentationError("foreground and background scribbles overlap")
    if scribbles.empty and prev_mask is None:
        raise SegmentationError("no scribbles and no previous mask: nothing to segment")
    if prev_mask is not None and prev_mask.pixels.shape != frame.shape[:2]:
        raise SegmentationError("previous mask must match frame dimensions")

    energy = build_interactive_energy(frame, prev_mask, scribbles, lam)
    labels = energy.solve()
    return Mask(pixels=labels, frame_index=frame_index, object_id=object_id)


# ---------------------------------------------------------------------------
# propagation


OOB_PENALTY = 2000.0  # per masked pixel pushed outside the frame
RESIDUAL_RADIUS = 2
MATCH_TOL = 3 * 20.0**2  # per-pixel SSD below which a block counts as matched


def _track_translation(frame_prev, frame_t, mask_prev, search_radius=SEARCH_RADIUS):
    """Best integer translation of the masked region from frame t-1 into
    frame t (SSD over masked pixels; leaving the frame costs a flat penalty
    per pixel, so vanished objects prefer out-of-bounds displacements)."""
    ys, xs = np.nonzero(mask_prev)
    prev_colors = frame_prev[ys, xs].astype(np.float64)
    h, w = mask_prev.shape
    ft = frame_t.astype(np.float64)
    n = len(ys)
    best_cost, best_d = np.inf, (0, 0)
    r = search_radius
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ty, tx = ys + dy, xs + dx
            inb = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            mism = ft[ty[inb], tx[inb]] - prev_colors[inb]
            cost = (mism * mism).sum() + OOB_PENALTY * (n - int(inb.sum()))
            cost += 0.01 * (dy * dy + dx * dx)  # tie-break toward small motion
            if cost < best_cost:
                best_cost, best_d = cost, (dy, dx)
    return best_d


def estimate_displacement(frame_prev, frame_t, mask_prev, search_radius=SEARCH_RADIUS, block=BLOCK_SIZE):
    """Dense forward displacement of the masked object: global translation
    by region matching, then per-block residual refinement with median
    smoothing.

    Returns (field (H, W, 2), matched_fraction). ``field[y, x]`` is the
    displacement of the content arriving at (y, x), so the warp reads the
    source pixel at (y, x) - field. ``matched_fraction`` is the fraction of
    object blocks whose refined match is good (per-pixel SSD below a fixed
    tolerance).
    """
    h, w = mask_prev.shape
    dy0, dx0 = _track_translation(frame_prev, frame_t, mask_prev, search_radius)
    field = np.zeros((h, w, 2), dtype=np.int64)
    field[:, :, 0] = dy0
    field[:, :, 1] = dx0

    # blocks of frame_t that the translated mask touches
    shifted = _shift_mask(mask_prev, dy0, dx0)
    if not shifted.any():
        return field, 0.0
    region = ndimage.binary_dilation(shifted, iterations=HARD_BAND)
    nby, nbx = (h + block - 1) // block, (w + block - 1) // block
    fp = frame_prev.astype(np.float64)
    ft = frame_t.astype(np.float64)
    res_dy = np.zeros((nby, nbx), dtype=np.int64)
    res_dx = np.zeros((nby, nbx), dtype=np.int64)
    matched = []
    rr = RESIDUAL_RADIUS
    for by in range(nby):
        for bx in range(nbx):
            y0, y1 = by * block, min((by + 1) * block, h)
            x0, x1 = bx * block, min((bx + 1) * block, w)
            if not region[y0:y1, x0:x1].any():
                continue
            target = ft[y0:y1, x0:x1]
            best_cost, best_r = np.inf, (0, 0)
            for ry in range(-rr, rr + 1):
                for rx in range(-rr, rr + 1):
                    sy0, sx0 = y0 - dy0 - ry, x0 - dx0 - rx
                    sy1, sx1 = sy0 + (y1 - y0), sx0 + (x1 - x0)
                    if sy0 < 0 or sx0 < 0 or sy1 > h or sx1 > w:
                        continue
                    d = target - fp[sy0:sy1, sx0:sx1]
                    cost = (d * d).sum() + 0.01 * (ry * ry + rx * rx)
                    if cost < best_cost:
                        best_cost, best_r = cost, (ry, rx)
            res_dy[by, bx], res_dx[by, bx] = best_r
            matched.append(best_cost / max((y1 - y0) * (x1 - x0), 1) <= MATCH_TOL)

    res_dy = ndimage.median_filter(res_dy, size=3, mode="nearest")
    res_dx = ndimage.median_filter(res_dx, size=3, mode="nearest")
    field[:, :, 0] += np.repeat(np.repeat(res_dy, block, axis=0), block, axis=1)[:h, :w]
    field[:, :, 1] += np.repeat(np.repeat(res_dx, block, axis=0), block, axis=1)[:h, :w]
    matched_fraction = float(np.mean(matched)) if matched else 0.0
    return field, matched_fraction


def _shift_mask(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    if ys1 > ys0 and xs1 > xs0:
        out[ys0:ys1, xs0:xs1] = mask[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    return out


def _warp_mask(mask: np.ndarray, field: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    vs, us = np.mgrid[0:h, 0:w]
    src_y = vs - field[:, :, 0]
    src_x = us - field[:, :, 1]
    inside = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    out = np.zeros_like(mask)
    out[inside] = mask[src_y[inside], src_x[inside]]
    return out


def propagate_mask(
    frame_t: np.ndarray,
    frame_prev: np.ndarray,
    mask_prev_frame: Mask,
    mask_prev_round: Mask | None = None,
    frame_index: int = 0,
    lam: float = SMOOTHNESS_LAMBDA,
) -> PropagationResult:
    """Propagate a mask from frame t-1 to frame t.

    Block-matching displacement warps the previous frame's mask; a graph cut
    with colour models from the warped mask refines it. When a previous-round
    mask exists its unaries are averaged in and its hard constraints win ties.
    """
    if mask_prev_frame.empty:
        raise SegmentationError("nothing to propagate: previous mask is empty")
    frame_t = np.asarray(frame_t, dtype=np.uint8)
    frame_prev = np.asarray(frame_prev, dtype=np.uint8)
    oid = mask_prev_frame.object_id

    if np.array_equal(frame_t, frame_prev):
        # zero displacement, no new evidence: the mask carries over as-is
        return PropagationResult(
            mask=Mask(mask_prev_frame.pixels.copy(), frame_index, oid), confidence=1.0
        )

    field, confidence = estimate_displacement(frame_prev, frame_t, mask_prev_frame.pixels)
    warped = _warp_mask(mask_prev_frame.pixels, field)
    if not warped.any():
        return PropagationResult(
            mask=Mask(np.zeros_like(warped), frame_index, oid), confidence=0.0, lost=True
        )

    bins = _color_bins(frame_t)
    cost_fg = _unary_from_hist(_histogram(bins, warped), bins)
    cost_bg = _unary_from_hist(_histogram(bins, ~warped), bins)
    if mask_prev_round is not None and mask_prev_round.pixels.shape == warped.shape:
        pr = mask_prev_round.pixels
        cost_fg = 0.5 * (cost_fg + _unary_from_hist(_histogram(bins, pr), bins))
        cost_bg = 0.5 * (cost_bg + _unary_from_hist(_histogram(bins, ~pr), bins))

    # deep interior/exterior of the warped mask are hard constraints
    hard_fg = ndimage.binary_erosion(warped, iterations=HARD_BAND)
    hard_bg = ~ndimage.binary_dilation(warped, iterations=HARD_BAND)
    if mask_prev_round is not None and mask_prev_round.pixels.shape == warped.shape:
        # previous-round hard constraints win ties
        pr_fg = ndimage.binary_erosion(mask_prev_round.pixels, iterations=HARD_BAND)
        pr_bg = ~ndimage.binary_dilation(mask_prev_round.pixels, iterations=HARD_BAND)
        hard_fg = (hard_fg & ~pr_bg) | pr_fg
        hard_bg = (hard_bg & ~pr_fg) | pr_bg
        hard_bg &= ~hard_fg
    cost_fg[hard_fg] = 0.0
    cost_bg[hard_fg] = HARD_COST
    cost_bg[hard_bg] = 0.0
    cost_fg[hard_bg] = HARD_COST

    w_right, w_down = contrast_weights(frame_t, lam)
    labels = GridEnergy(cost_fg, cost_bg, w_right, w_down).solve()
    return PropagationResult(
        mask=Mask(labels, frame_index, oid), confidence=confidence, lost=False
    )


def propagate_range(
    frames: list[np.ndarray],
    seed_mask: Mask,
    start: int,
    end: int,
    object_id: str = "",
) -> list[PropagationResult]:
    """Propagate a seed mask forward and backward over frames [start, end].

    ``frames`` is indexed by absolute frame number (a list covering at least
    the range). After an object is lost, propagation continues from the last
    non-empty mask and every subsequent frame is flagged.
    """
    seed_index = seed_mask.frame_index
    if not start <= seed_index <= end:
        raise SegmentationError(f"seed frame {seed_index} outside range [{start}, {end}]")
    oid = object_id or seed_mask.object_id
    results: dict[int, PropagationResult] = {
        seed_index: PropagationResult(
            mask=Mask(seed_mask.pixels.copy(), seed_index, oid), confidence=1.0
        )
    }
    for direction, stop in ((1, end), (-1, start)):
        last_good = results[seed_index].mask
        tainted = False
        t = seed_index + direction
        while (t <= stop) if direction == 1 else (t >= stop):
            res = propagate_mask(frames[t], frames[t - direction], last_good, frame_index=t)
            if tainted:
                res = PropagationResult(res.mask, res.confidence, lost=True)
            elif res.lost or res.mask.empty:
                tainted = True
            else:
                last_good = res.mask
            results[t] = res
            t += direction
    return [results[i] for i in range(start, end + 1)]
