import numpy as np
import pytest

from adverts.errors import SegmentationError
from adverts.segmentation import (
    Mask,
    Scribbles,
    build_interactive_energy,
    decode_rle,
    encode_rle,
    propagate_mask,
    propagate_range,
    segment_interactive,
)

RED = np.array([200, 30, 30], dtype=np.uint8)
BLUE = np.array([30, 30, 200], dtype=np.uint8)


def two_region_image(h=48, w=64):
    """Left half pure red, right half pure blue; ground truth = left half."""
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:, : w // 2] = RED
    img[:, w // 2 :] = BLUE
    truth = np.zeros((h, w), dtype=bool)
    truth[:, : w // 2] = True
    return img, truth


def scribble_maps(h, w, fg_pts=(), bg_pts=()):
    fg = np.zeros((h, w), dtype=bool)
    bg = np.zeros((h, w), dtype=bool)
    for y, x in fg_pts:
        fg[y, x] = True
    for y, x in bg_pts:
        bg[y, x] = True
    return Scribbles(fg=fg, bg=bg)


def draw_disk(img, cy, cx, radius, color):
    h, w = img.shape[:2]
    vs, us = np.mgrid[0:h, 0:w]
    inside = (vs - cy) ** 2 + (us - cx) ** 2 <= radius**2
    img[inside] = color
    return inside


def iou(a, b):
    inter = (a & b).sum()
    union = (a | b).sum()
    return inter / union if union else 1.0


class TestInteractive:
    def test_two_region_exact(self):
        img, truth = two_region_image()
        scr = scribble_maps(48, 64, fg_pts=[(24, 10)], bg_pts=[(24, 50)])
        mask = segment_interactive(img, None, scr)
        assert np.array_equal(mask.pixels, truth)

    def test_full_frame_fg_scribble(self):
        img, _ = two_region_image()
        scr = Scribbles(fg=np.ones((48, 64), dtype=bool), bg=np.zeros((48, 64), dtype=bool))
        mask = segment_interactive(img, None, scr)
        assert mask.pixels.all()

    def test_second_round_corrective_scribble(self):
        img, truth = two_region_image()
        # previous round leaked into a corner of the blue region
        bad = truth.copy()
        bad[0:8, 32:40] = True
        scr = scribble_maps(48, 64, fg_pts=[(24, 10)], bg_pts=[(4, 36)])
        mask = segment_interactive(img, Mask(bad), scr)
        assert iou(mask.pixels, truth) == 1.0

    def test_overlapping_scribbles_error(self):
        img, _ = two_region_image()
        scr = scribble_maps(48, 64)
        scr.fg[5, 5] = True
        scr.bg[5, 5] = True
        with pytest.raises(SegmentationError, match="overlap"):
            segment_interactive(img, None, scr)

    def test_empty_scribbles_without_prev_mask_error(self):
        img, _ = two_region_image()
        with pytest.raises(SegmentationError, match="nothing to segment"):
            segment_interactive(img, None, scribble_maps(48, 64))

    def test_empty_scribbles_with_prev_mask_ok(self):
        img, truth = two_region_image()
        mask = segment_interactive(img, Mask(truth.copy()), scribble_maps(48, 64))
        assert np.array_equal(mask.pixels, truth)

    def test_hard_constraints_always_respected(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            img = rng.integers(0, 256, (32, 40, 3), dtype=np.uint8)
            fg = rng.random((32, 40)) < 0.05
            bg = (rng.random((32, 40)) < 0.05) & ~fg
            if not fg.any() or not bg.any():
                continue
            mask = segment_interactive(img, None, Scribbles(fg=fg, bg=bg))
            assert mask.pixels[fg].all()
            assert not mask.pixels[bg].any()

    def test_idempotent_on_optimum(self):
        img, truth = two_region_image()
        scr = scribble_maps(48, 64, fg_pts=[(24, 10)], bg_pts=[(24, 50)])
        m1 = segment_interactive(img, None, scr)
        m2 = segment_interactive(img, Mask(m1.pixels.copy()), scr)
        assert np.array_equal(m1.pixels, m2.pixels)

    def test_output_is_energy_optimal_vs_perturbations(self):
        img, _ = two_region_image()
        scr = scribble_maps(48, 64, fg_pts=[(24, 10)], bg_pts=[(24, 50)])
        energy = build_interactive_energy(img, None, scr)
        labels = energy.solve()
        e0 = energy.energy(labels)
        rng = np.random.default_rng(17)
        for _ in range(1000):
            flips = rng.random(labels.shape) < rng.uniform(0.005, 0.2)
            assert e0 <= energy.energy(labels ^ flips) + 1e-6

    def test_deterministic(self):
        img, _ = two_region_image()
        scr = scribble_maps(48, 64, fg_pts=[(24, 10)], bg_pts=[(24, 50)])
        a = segment_interactive(img, None, scr)
        b = segment_interactive(img, None, scr)
        assert np.array_equal(a.pixels, b.pixels)


class TestPropagate:
    def _disk_frame(self, cy, cx, h=64, w=80, radius=12):
        img = np.empty((h, w, 3), dtype=np.uint8)
        img[:] = BLUE
        truth = draw_disk(img, cy, cx, radius, RED)
        return img, truth

    def test_identical_frames_identity(self):
        img, truth = self._disk_frame(32, 30)
        res = propagate_mask(img, img.copy(), Mask(truth.copy(), frame_index=0), frame_index=1)
        assert np.array_equal(res.mask.pixels, truth)
        assert res.confidence == 1.0
        assert not res.lost

    def test_translated_disk_iou(self):
        f0, t0 = self._disk_frame(32, 30)
        f1, t1 = self._disk_frame(32, 35)
        res = propagate_mask(f1, f0, Mask(t0))
        assert iou(res.mask.pixels, t1) >= 0.95

    def test_empty_previous_mask_error(self):
        img, _ = self._disk_frame(32, 30)
        with pytest.raises(SegmentationError, match="nothing to propagate"):
            propagate_mask(img, img, Mask(np.zeros((64, 80), dtype=bool)))

    def test_object_leaving_frame_flags_lost(self):
        f0 = np.empty((64, 80, 3), dtype=np.uint8)
        f0[:] = BLUE
        t0 = draw_disk(f0, 32, 4, 3, RED)  # hugging the left edge
        f1 = np.full((64, 80, 3), BLUE, dtype=np.uint8)  # object gone
        res = propagate_mask(f1, f0, Mask(t0))
        assert res.lost
        assert res.mask.empty

    def test_deterministic(self):
        f0, t0 = self._disk_frame(32, 30)
        f1, _ = self._disk_frame(32, 35)
        a = propagate_mask(f1, f0, Mask(t0))
        b = propagate_mask(f1, f0, Mask(t0))
        assert np.array_equal(a.mask.pixels, b.mask.pixels)


class TestPropagateRange:
    def _sequence(self, centers, h=64, w=96, radius=12):
        frames, truths = [], []
        for cy, cx in centers:
            img = np.full((h, w, 3), BLUE, dtype=np.uint8)
            truths.append(draw_disk(img, cy, cx, radius, RED))
            frames.append(img)
        return frames, truths

    def test_static_scene_all_equal_seed(self):
        frames, truths = self._sequence([(32, 40)] * 10)
        results = propagate_range(frames, Mask(truths[0], frame_index=0), 0, 9)
        assert len(results) == 10
        for r in results:
            assert np.array_equal(r.mask.pixels, truths[0])
            assert r.confidence == 1.0

    def test_translating_disk_iou(self):
        centers = [(32, 20 + 5 * t) for t in range(10)]
        frames, truths = self._sequence(centers)
        results = propagate_range(frames, Mask(truths[0], frame_index=0), 0, 9)
        for r, truth in zip(results, truths):
            assert iou(r.mask.pixels, truth) >= 0.95, r.mask.frame_index

    def test_bidirectional_from_middle_seed(self):
        centers = [(32, 20 + 5 * t) for t in range(10)]
        frames, truths = self._sequence(centers)
        seed = Mask(truths[5], frame_index=5)
        results = propagate_range(frames, seed, 0, 9)
        for r, truth in zip(results, truths):
            assert iou(r.mask.pixels, truth) >= 0.95
        assert [r.mask.frame_index for r in results] == list(range(10))

    def test_seed_outside_range_error(self):
        frames, truths = self._sequence([(32, 40)] * 4)
        with pytest.raises(SegmentationError, match="outside range"):
            propagate_range(frames, Mask(truths[0], frame_index=0), 1, 3)

    def test_lost_object_taints_subsequent_frames(self):
        h, w = 64, 80
        frames = []
        truth0 = None
        for t in range(6):
            img = np.full((h, w, 3), BLUE, dtype=np.uint8)
            if t < 2:  # disk exists only in frames 0..1, hugging the edge
                inside = draw_disk(img, 32, 6 - 4 * t, 3, RED)
                if t == 0:
                    truth0 = inside
            frames.append(img)
        results = propagate_range(frames, Mask(truth0, frame_index=0), 0, 5)
        lost_from = next(i for i, r in enumerate(results) if r.lost)
        assert all(r.lost for r in results[lost_from:])


class TestRLE:
    def test_round_trip(self):
        rng = np.random.default_rng(2)
        bitmap = rng.random((33, 57)) < 0.2
        assert np.array_equal(decode_rle(encode_rle(bitmap)), bitmap)

    def test_empty_and_full(self):
        empty = np.zeros((5, 7), dtype=bool)
        assert np.array_equal(decode_rle(encode_rle(empty)), empty)
        full = np.ones((5, 7), dtype=bool)
        doc = encode_rle(full)
        assert doc["runs"] == [0, 35]
        assert np.array_equal(decode_rle(doc), full)

    def test_out_of_bounds_run_rejected(self):
        with pytest.raises(SegmentationError):
            decode_rle({"width": 4, "height": 4, "runs": [14, 5]})
