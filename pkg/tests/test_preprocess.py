import numpy as np
import pytest

from cinephase.errors import CollimationError, ShapeError
from cinephase.preprocess import collimation_box, normalize, preprocess_frames, resize_frames


def _bordered(n=4, inner=(20, 30), border=10, seed=0):
    rng = np.random.default_rng(seed)
    inner_frames = rng.integers(30, 255, (n, *inner)).astype(np.uint8)
    out = np.zeros((n, inner[0] + 2 * border, inner[1] + 2 * border), np.uint8)
    out[:, border:-border, border:-border] = inner_frames
    return out, inner_frames


def test_black_border_is_removed_exactly():
    frames, inner = _bordered()
    top, bottom, left, right = collimation_box(frames)
    assert (top, bottom, left, right) == (10, 30, 10, 40)
    assert np.array_equal(frames[:, top:bottom, left:right], inner)


def test_static_but_textured_border_is_kept():
    frames, _ = _bordered()
    frames[:, :10, :] = np.arange(frames.shape[2], dtype=np.uint8)  # varies along the row
    top, _, _, _ = collimation_box(frames)
    assert top == 0


def test_no_border_is_identity_up_to_normalisation():
    rng = np.random.default_rng(1)
    frames = rng.random((3, 16, 16))
    out, box = preprocess_frames(frames, 16, dtype=np.float64)
    assert box == (0, 16, 0, 16)
    assert np.allclose(out, normalize(frames))


def test_large_input_is_downsampled():
    frames = np.random.default_rng(2).integers(0, 255, (2, 1024, 1024)).astype(np.uint8)
    out, _ = preprocess_frames(frames, 512)
    assert out.shape == (2, 512, 512)
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_excessive_collimation_is_rejected():
    frames = np.zeros((3, 40, 40), np.uint8)
    frames[:, 18:22, 18:22] = np.random.default_rng(3).integers(1, 255, (3, 4, 4))
    with pytest.raises(CollimationError):
        collimation_box(frames)
    with pytest.raises(CollimationError):
        collimation_box(np.zeros((2, 8, 8)))


def test_one_sided_heavy_crop_is_allowed():
    frames = np.random.default_rng(4).integers(30, 255, (4, 20, 8)).astype(np.uint8)
    padded = np.zeros((4, 20, 30), np.uint8)
    padded[:, :, :8] = frames
    assert collimation_box(padded) == (0, 20, 0, 8)


def test_shape_checks_and_resize():
    with pytest.raises(ShapeError):
        collimation_box(np.zeros((4, 4)))
    r = resize_frames(np.ones((2, 10, 20)), 8)
    assert r.shape == (2, 8, 8) and np.allclose(r, 1.0)
    assert not normalize(np.full((2, 3, 3), 7.0)).any()
