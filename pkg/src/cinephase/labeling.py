"""Per-frame phase labels, 10 fps normalisation and training windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ecg import PhaseSignal
from .errors import NoOverlap, UnsupportedFrameRate

TARGET_FPS = 10.0
WINDOW = 10
TARGET_OFFSET = 3
N_TARGETS = 4


@dataclass
class FrameLabelTrack:
    """Fractional labels in [0, 1] for a run of frames.

    ``frame_index`` holds each label's frame index in the parent sequence.
    """

    labels: np.ndarray
    fps: float
    frame_index: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        if len(self.labels) != len(self.frame_index):
            raise ValueError("labels and frame_index differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def frame_interval(self) -> tuple[int, int]:
        return int(self.frame_index[0]), int(self.frame_index[-1])

    def restrict(self, start: int, end: int) -> FrameLabelTrack:
        """Keep frames whose parent index lies in ``[start, end]``."""
        keep = (self.frame_index >= start) & (self.frame_index <= end)
        if not keep.any():
            raise NoOverlap(f"no labelled frame inside [{start}, {end}]")
        return FrameLabelTrack(self.labels[keep], self.fps, self.frame_index[keep])


def frame_sample_bounds(n_samples: int, n_frames: int) -> np.ndarray:
    """Boundaries ``floor(i S / N)`` for ``i = 0..N``; frame ``i`` owns ``[b[i], b[i+1])``."""
    i = np.arange(n_frames + 1, dtype=np.int64)
    return (i * n_samples) // n_frames


def map_phase_to_frames(phase: PhaseSignal, n_frames: int, fps: float) -> FrameLabelTrack:
    """Average the phase signal over each frame's equal share of the samples.

    Frames whose share is not entirely inside the phase signal's valid range
    are dropped. Labels are not rounded.
    """
    n_samples = len(phase.values)
    if n_frames < 1 or n_samples < n_frames:
        raise ValueError(f"cannot split {n_samples} samples into {n_frames} frames")
    bounds = frame_sample_bounds(n_samples, n_frames)
    v0, v1 = phase.valid_range
    ok = np.nonzero((bounds[:-1] >= v0) & (bounds[1:] <= v1))[0]
    if len(ok) == 0:
        raise NoOverlap(f"no frame lies inside the valid ECG range [{v0}, {v1})")
    csum = np.concatenate(([0], np.cumsum(phase.values, dtype=np.int64)))
    counts = csum[bounds[ok + 1]] - csum[bounds[ok]]
    labels = counts / (bounds[ok + 1] - bounds[ok])
    return FrameLabelTrack(labels, fps, ok)


def resample_indices(n_frames: int, fps: float) -> np.ndarray:
    """Positions ``round(k fps / 10)`` (halves rounded up) that fall inside ``n_frames``."""
    if fps < TARGET_FPS:
        raise UnsupportedFrameRate(f"frame rate {fps} is below {TARGET_FPS:g} fps")
    idx = []
    k = 0
    while True:
        j = int(np.floor(k * fps / TARGET_FPS + 0.5))
        if j >= n_frames:
            break
        idx.append(j)
        k += 1
    return np.asarray(idx, dtype=np.int64)


def resample_to_10fps(track: FrameLabelTrack, frames=None):
    """Decimate a track (and optionally its frames) to 10 fps.

    Returns ``(frames', track')``; ``track'.frame_index`` keeps the parent
    indices so predictions can be mapped back later.
    """
    pos = resample_indices(len(track), track.fps)
    out_frames = None if frames is None else np.asarray(frames)[pos]
    return out_frames, FrameLabelTrack(track.labels[pos], TARGET_FPS, track.frame_index[pos])


@dataclass
class WindowDataset:
    """All 10-frame windows of one resampled sequence.

    Window ``w`` spans frames ``w..w+9``; its targets are the labels of
    frames ``w+3..w+6``.
    """

    frames: np.ndarray | None
    labels: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return len(self.starts)

    @property
    def targets(self) -> np.ndarray:
        if len(self.starts) == 0:
            return np.zeros((0, N_TARGETS))
        return np.stack([self.labels[w + TARGET_OFFSET:w + TARGET_OFFSET + N_TARGETS] for w in self.starts])

    def window(self, i: int):
        w = int(self.starts[i])
        return self.frames[w:w + WINDOW], self.labels[w + TARGET_OFFSET:w + TARGET_OFFSET + N_TARGETS]


def make_training_windows(frames, track: FrameLabelTrack) -> WindowDataset:
    x = len(track)
    n = x - (WINDOW - 1) if x >= WINDOW else 0
    return WindowDataset(frames, track.labels.copy(), np.arange(n, dtype=np.int64))
