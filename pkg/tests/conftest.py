import math

import numpy as np
import pytest

from adverts.geometry import CameraPose, Intrinsics, rotation_from_axis_angle


def random_rotation(rng) -> np.ndarray:
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0, math.pi * 0.9)
    return rotation_from_axis_angle(w)


def random_pose(rng, max_offset=2.0) -> CameraPose:
    R = random_rotation(rng)
    T = rng.uniform(-max_offset, max_offset, 3)
    return CameraPose(R, T)


def looking_at_pose(center, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """World->camera pose for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=float)
    fwd = np.asarray(target, dtype=float) - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return CameraPose(R, -R @ center)


@pytest.fixture
def k640():
    return Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0)
