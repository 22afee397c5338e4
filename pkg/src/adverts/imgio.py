"""PNG / PFM image I/O helpers shared across the pipeline.

All frame pixels are numpy arrays: RGB uint8 (H, W, 3), masks uint8 (H, W)
with values {0, 255}, depth uint16 (H, W) or float32 (H, W).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import sparse

from .errors import MediaStoreError


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as e:
        raise MediaStoreError(f"unreadable image {path}: {e}") from e


def write_rgb(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise MediaStoreError(f"expected (H, W, 3) RGB array, got {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_gray8(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, SyntaxError) as e:
        raise MediaStoreError(f"unreadable image {path}: {e}") from e


def write_gray8(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_gray16(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise MediaStoreError(f"unreadable image {path}: {e}") from e
    if arr.dtype == np.uint8:
        return arr.astype(np.uint16)
    return arr.astype(np.uint16)


def write_gray16(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype=np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="I;16").save(path, format="PNG")


def read_pfm(path) -> np.ndarray:
    """Single-channel PFM float map (header 'Pf', bottom-up rows)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise MediaStoreError(f"{path}: not a single-channel PFM file")
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        data = f.read(width * height * 4)
    endian = "<" if scale < 0 else ">"
    arr = np.frombuffer(data, dtype=endian + "f4").reshape(height, width)
    return np.flipud(arr).astype(np.float32)


def write_pfm(path, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise MediaStoreError("PFM writer expects a 2D array")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def round_half_even_u8(values: np.ndarray) -> np.ndarray:
    """Float -> uint8 with banker's rounding, fixed project-wide so that
    checkpointed artifacts are bit-exact."""
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def area_downscale(pixels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Exact area-average resampling (float weights, separable).

    Each output pixel is the mean of the source rectangle it covers, with
    fractional rows/columns weighted by overlap.
    """
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape[:2]
    if out_w > w or out_h > h:
        raise MediaStoreError("area_downscale cannot upscale")
    # each output row/column overlaps only a handful of source rows/columns,
    # so the weight matrices are sparse
    wy = sparse.csr_matrix(_overlap_weights(h, out_h))
    wx = sparse.csr_matrix(_overlap_weights(w, out_w))
    if src.ndim == 2:
        out = wy @ src @ wx.T
    else:
        out = np.stack(
            [wy @ src[:, :, c] @ wx.T for c in range(src.shape[2])], axis=-1
        )
    return round_half_even_u8(out) if pixels.dtype == np.uint8 else out


def _overlap_weights(n_src: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_src) matrix of interval-overlap fractions."""
    W = np.zeros((n_out, n_src))
    step = n_src / n_out
    for i in range(n_out):
        a, b = i * step, (i + 1) * step
        lo, hi = int(np.floor(a)), int(np.ceil(b))
        for r in range(lo, min(hi, n_src)):
            W[i, r] = max(0.0, min(b, r + 1) - max(a, r)) / step
    return W
