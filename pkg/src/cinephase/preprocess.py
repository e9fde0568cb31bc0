"""Frame preprocessing: collimation cropping, square resizing, normalisation."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import zoom

from .errors import CollimationError, ShapeError

COLLIMATION_EPS = 1e-6


def _flat_lines(frames: np.ndarray, axis: int, eps: float) -> np.ndarray:
    """Boolean per row (axis=1) or column (axis=2): variance of all its values
    over every frame is below ``eps``."""
    other = 2 if axis == 1 else 1
    return frames.var(axis=(0, other)) < eps


def _run_length(flags: np.ndarray) -> int:
    n = 0
    for f in flags:
        if not f:
            break
        n += 1
    return n


def collimation_box(frames: np.ndarray, eps: float = COLLIMATION_EPS) -> tuple[int, int, int, int]:
    """``(top, bottom, left, right)`` bounds of the exposed field, half-open.

    A border row or column is collimated when its pixel values, across all
    frames and along the line, have variance below ``eps`` (relative to a
    [0, 1] intensity scale). Raises ``CollimationError`` when more than half of
    both dimensions would be removed.
    """
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"expected (frames, height, width), got {f.shape}")
    scale = f.max() - f.min()
    if scale > 0:
        f = (f - f.min()) / scale
    h, w = f.shape[1:]
    rows = _flat_lines(f, 1, eps)
    cols = _flat_lines(f, 2, eps)
    top = _run_length(rows)
    left = _run_length(cols)
    bottom = h - _run_length(rows[::-1]) if top < h else h
    right = w - _run_length(cols[::-1]) if left < w else w
    cut_h = h - max(0, bottom - top)
    cut_w = w - max(0, right - left)
    if (cut_h > h / 2 and cut_w > w / 2) or bottom <= top or right <= left:
        raise CollimationError(
            f"collimation detection would remove {cut_h}/{h} rows and {cut_w}/{w} columns"
        )
    return top, bottom, left, right


def resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of every frame to ``size x size``."""
    f = np.asarray(frames, dtype=np.float64)
    h, w = f.shape[1:]
    if (h, w) == (size, size):
        return f.copy()
    return zoom(f, (1.0, size / h, size / w), order=1, mode="nearest", grid_mode=True)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Resize a binary mask by bilinear interpolation and a 0.5 threshold."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape == (size, size):
        return m > 0.5
    return zoom(m, (size / m.shape[0], size / m.shape[1]), order=1, mode="nearest", grid_mode=True) >= 0.5


def normalize(frames: np.ndarray) -> np.ndarray:
    """Min-max scale the whole sequence to [0, 1]; a constant sequence maps to zeros."""
    f = np.asarray(frames, dtype=np.float64)
    lo, hi = f.min(), f.max()
    if hi <= lo:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def preprocess_frames(frames: np.ndarray, size: int, eps: float = COLLIMATION_EPS, dtype=np.float32):
    """Crop collimation, resize to ``size``, normalise to [0, 1].

    Returns ``(stack, box)`` where ``box`` is the crop in input pixels.
    """
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    box = collimation_box(frames, eps)
    top, bottom, left, right = box
    cropped = frames[:, top:bottom, left:right]
    out = normalize(resize_frames(cropped, size))
    return out.astype(dtype), box
