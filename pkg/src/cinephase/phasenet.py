"""Cardiac phase classifier and its sliding-window application.

Each frame is mapped to a 64-vector by a small spatial CNN. Ten consecutive
feature vectors pass through a depthwise temporal convolution (10x64 to 8x64)
and a two-layer classifier that outputs diastole probabilities for window
positions 3-6. At inference time the spatial features of a sequence are
computed once and shared by every window; overlapping window outputs are
fused per frame, upsampled to the acquisition frame rate and binarised with
a Schmitt trigger.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import rotate
from scipy.special import expit

from .errors import ConfigError, DomainError, EmptyDataset, FormatError, SequenceTooShort, ShapeError
from .labeling import N_TARGETS, TARGET_OFFSET, WINDOW, WindowDataset
from .nn import (
    AdamState,
    Conv2D,
    Dense,
    DepthwiseConv1D,
    Dropout,
    MaxPool2D,
    ParamStore,
    ReLU,
    Sigmoid,
    adam_step,
    backward,
    config_hash,
    forward,
    init_params,
    load_params,
    output_shape,
    save_params,
)

logger = logging.getLogger(__name__)

SCHMITT_HI = 0.6
SCHMITT_LO = 0.4


# -- loss ---------------------------------------------------------------------

def _check_domain(p: np.ndarray, y: np.ndarray) -> None:
    if np.any((p <= 0.0) | (p >= 1.0)) or not np.all(np.isfinite(p)):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    if np.any((y < 0.0) | (y > 1.0)):
        raise DomainError("targets must lie in [0, 1]")


def _loss_weight(p, y, correct_weight):
    hard = (y == 0.0) | (y == 1.0)
    correct = (p > 0.5) == (y == 1.0)
    return np.where(hard & correct, correct_weight, 1.0)


def phase_loss(p, y, correct_weight: float = 0.25) -> np.ndarray:
    """Binary cross-entropy, scaled down by ``correct_weight`` when a hard
    target (0 or 1) is already on the right side of 0.5.

    Elementwise over broadcastable ``p`` and ``y``. Fractional targets keep
    full weight. A probability of exactly 0.5 counts as class 0.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_domain(p, y)
    bce = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return bce * _loss_weight(p, y, correct_weight)


def phase_loss_grad(p, y, correct_weight: float = 0.25) -> np.ndarray:
    """Elementwise derivative of :func:`phase_loss` with respect to ``p``
    (the weight is piecewise constant)."""
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    _check_domain(p, y)
    return (p - y) / (p * (1.0 - p)) * _loss_weight(p, y, correct_weight)


def phase_loss_logits(z, y, correct_weight: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """:func:`phase_loss` of ``sigmoid(z)`` and its derivative with respect to ``z``.

    Evaluated without forming ``log(p)``, so saturated outputs stay finite.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((y < 0.0) | (y > 1.0)):
        raise DomainError("targets must lie in [0, 1]")
    hard = (y == 0.0) | (y == 1.0)
    w = np.where(hard & ((z > 0.0) == (y == 1.0)), correct_weight, 1.0)
    loss = (np.logaddexp(0.0, z) - y * z) * w
    return loss, (expit(z) - y) * w


# -- model --------------------------------------------------------------------

@dataclass
class PhaseNetConfig:
    resolution: int = 64
    channels: tuple = (8, 16, 32, 64, 64)
    features: int = 64
    temporal_kernel: int = 3
    hidden: int = 64
    dropout: float = 0.5
    correct_weight: float = 0.25
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    dtype: str = "float32"
    augment: bool = True
    rotation_deg: float = 10.0
    intensity: float = 0.2
    center: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self) -> None:
        if self.resolution < 2 or self.resolution & (self.resolution - 1):
            raise ConfigError(f"resolution must be a power of two >= 2, got {self.resolution}")
        if WINDOW - self.temporal_kernel + 1 < 1:
            raise ConfigError("temporal kernel longer than the window")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.epochs < 0 or self.lr <= 0 or self.hidden < 1 or self.features < 1:
            raise ConfigError("epochs >= 0, lr > 0, hidden >= 1 and features >= 1 required")
        if not self.channels:
            raise ConfigError("at least one spatial block is needed")

    @property
    def n_blocks(self) -> int:
        """Conv/pool blocks actually used; small inputs stop before pooling to nothing."""
        return min(len(self.channels), int(np.log2(self.resolution)))

    @property
    def temporal_length(self) -> int:
        return WINDOW - self.temporal_kernel + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    def architecture_hash(self) -> str:
        keys = ("resolution", "channels", "features", "temporal_kernel", "hidden", "dropout", "center")
        return config_hash({k: self.to_dict()[k] for k in keys})


class PhaseNet:
    """Spatial CNN, depthwise temporal convolution and two-layer classifier.

    ``spatial_calls`` counts frames pushed through the spatial CNN, so callers
    can verify that inference evaluates it once per frame.
    """

    def __init__(self, config: PhaseNetConfig):
        config.validate()
        self.config = config
        c = config
        spatial = []
        prev = 1
        for i, ch in enumerate(c.channels[: c.n_blocks]):
            spatial += [Conv2D(prev, ch, 3, name=f"spatial{i}.conv"), ReLU(), MaxPool2D(2)]
            prev = ch
        flat = int(np.prod(output_shape(spatial, (1, 1, c.resolution, c.resolution))[1:]))
        spatial += [Dense(flat, c.features, name="spatial.fc"), ReLU()]
        self.spatial = spatial
        self.temporal = [DepthwiseConv1D(c.features, c.temporal_kernel, name="temporal")]
        self.classifier = [
            Dense(c.temporal_length * c.features, c.hidden, name="classifier.fc1"),
            ReLU(),
            Dropout(c.dropout),
            Dense(c.hidden, N_TARGETS, name="classifier.fc2"),
            Sigmoid(),
        ]
        self.spatial_calls = 0

    @property
    def head(self) -> list:
        return self.temporal + self.classifier

    def init(self, rng: np.random.Generator, dtype=None) -> ParamStore:
        dtype = np.dtype(dtype or self.config.dtype)
        params = ParamStore()
        for stack in (self.spatial, self.temporal, self.classifier):
            init_params(stack, rng, dtype, params)
        return params

    def spatial_features(self, params: ParamStore, frames: np.ndarray, mode: str = "infer", batch: int = 64):
        """Per-frame feature vectors ``(M, features)`` for frames ``(M, R, R)``.

        In train mode the whole stack is one batch and the tape is returned too.
        """
        frames = np.asarray(frames)
        r = self.config.resolution
        if frames.ndim != 3 or frames.shape[1:] != (r, r):
            raise ShapeError(f"expected frames of shape (M, {r}, {r}), got {frames.shape}")
        dtype = params.values["spatial.fc.weight"].dtype
        x = frames[:, None].astype(dtype, copy=False)
        self.spatial_calls += len(frames)
        if mode == "train":
            return forward(self.spatial, params, x, "train")
        out = [forward(self.spatial, params, x[s:s + batch])[0] for s in range(0, len(x), batch)]
        return (np.concatenate(out) if out else np.zeros((0, self.config.features), dtype)), None

    def predict_windows(self, params: ParamStore, windows: np.ndarray, mode: str = "infer", rng=None):
        """Probabilities ``(N, 4)`` for feature windows ``(N, 10, features)``."""
        if windows.ndim != 3 or windows.shape[1:] != (WINDOW, self.config.features):
            raise ShapeError(f"expected windows of shape (N, {WINDOW}, {self.config.features}), got {windows.shape}")
        return forward(self.head, params, windows, mode, rng)

    def predict_window(self, params: ParamStore, features: np.ndarray) -> np.ndarray:
        """Four probabilities for window positions 3-6 from a ``(10, features)`` block."""
        features = np.asarray(features)
        if features.shape != (WINDOW, self.config.features):
            raise ShapeError(f"expected ({WINDOW}, {self.config.features}) features, got {features.shape}")
        return self.predict_windows(params, features[None])[0][0]


def center_frames(frames: np.ndarray) -> np.ndarray:
    """Subtract the sequence's per-pixel temporal mean.

    Static anatomy and background cancel, so the spatial CNN sees mostly the
    frame-to-frame displacement that carries the phase.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        return frames
    return frames - frames.mean(axis=0, dtype=np.float64).astype(frames.dtype)


def feature_windows(features: np.ndarray) -> np.ndarray:
    """All step-1 windows ``(M - 9, 10, F)`` of a feature sequence ``(M, F)``."""
    m = len(features)
    if m < WINDOW:
        raise SequenceTooShort(f"{m} frames at 10 fps; at least {WINDOW} are needed")
    return np.ascontiguousarray(sliding_window_view(features, WINDOW, axis=0).transpose(0, 2, 1))


# -- sliding window inference ---------------------------------------------------

def window_predictions(net: PhaseNet, params: ParamStore, frames: np.ndarray) -> np.ndarray:
    """Window outputs ``(M - 9, 4)``; the spatial CNN runs once per frame."""
    if len(frames) < WINDOW:
        raise SequenceTooShort(f"{len(frames)} frames at 10 fps; at least {WINDOW} are needed")
    if net.config.center:
        frames = center_frames(frames)
    feats, _ = net.spatial_features(params, frames)
    probs, _ = net.predict_windows(params, feature_windows(feats))
    return probs.astype(np.float64)


def collect_candidates(window_probs: np.ndarray, n_frames: int) -> list[list[float]]:
    """Per-frame candidate lists in window order; window ``w`` feeds frames ``w+3..w+6``."""
    cands: list[list[float]] = [[] for _ in range(n_frames)]
    for w, row in enumerate(np.asarray(window_probs)):
        for j, p in enumerate(row):
            cands[w + TARGET_OFFSET + j].append(float(p))
    return cands


def candidate_counts(m: int) -> np.ndarray:
    """Closed-form number of windows covering each frame of an ``m``-frame sequence."""
    i = np.arange(m)
    lo = np.maximum(0, i - (TARGET_OFFSET + N_TARGETS - 1))
    hi = np.minimum(m - WINDOW, i - TARGET_OFFSET)
    return np.maximum(0, hi - lo + 1)


def aggregate(candidates: list[list[float]]) -> list[float | None]:
    """Pick, per frame, the candidate farthest from 0.5; ``None`` below two candidates.

    Ties keep the earliest window's value.
    """
    out: list[float | None] = []
    for c in candidates:
        if len(c) < 2:
            out.append(None)
            continue
        best = c[0]
        for p in c[1:]:
            if abs(p - 0.5) > abs(best - 0.5):
                best = p
        out.append(best)
    return out


def upsample_probs(selected_index, selected_probs, target_index) -> np.ndarray:
    """Linear interpolation of selected probabilities onto original frame indices.

    ``selected_index`` are original-frame positions of the 10 fps frames with
    a selected probability; values beyond the outermost ones are held.
    """
    xs = np.asarray(selected_index, dtype=np.float64)
    ys = np.asarray(selected_probs, dtype=np.float64)
    if len(xs) < 2:
        raise SequenceTooShort(f"{len(xs)} frames carry a fused probability; at least 2 are needed")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("selected frame positions must be strictly increasing")
    return np.interp(np.asarray(target_index, dtype=np.float64), xs, ys)


def schmitt_filter(probs, hi: float = SCHMITT_HI, lo: float = SCHMITT_LO) -> np.ndarray:
    """Hysteresis thresholding: switch to 1 at ``p >= hi``, to 0 at ``p <= lo``.

    The initial state is 1 when the first probability is at least 0.5.
    """
    if not 0.0 <= lo < hi <= 1.0:
        raise ConfigError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    p = np.asarray(probs, dtype=np.float64)
    out = np.zeros(len(p), dtype=np.uint8)
    if len(p) == 0:
        return out
    state = 1 if p[0] >= 0.5 else 0
    for i, v in enumerate(p):
        if v >= hi:
            state = 1
        elif v <= lo:
            state = 0
        out[i] = state
    return out


def edf_flags(labels) -> np.ndarray:
    """Frames labelled 1 whose successor is labelled below 1."""
    lab = np.asarray(labels, dtype=np.float64)
    flags = np.zeros(len(lab), dtype=bool)
    if len(lab) > 1:
        flags[:-1] = (lab[:-1] == 1.0) & (lab[1:] >= 0.0) & (lab[1:] < 1.0)
    return flags


@dataclass
class PredictionTrace:
    """Everything the inference chain produced for one sequence.

    ``resampled_index`` maps each 10 fps frame to its original frame index;
    ``frame_index`` lists the original frames that received a label.
    """

    sequence_id: str
    interval: tuple[int, int]
    resampled_index: list
    candidates: list
    selected: list
    frame_index: list
    probabilities: list
    labels: list
    edf: list
    spatial_calls: int = 0
    timings: dict = field(default_factory=dict)
    weights_hash: str = ""

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "sequence_id": self.sequence_id,
            "interval": list(self.interval),
            "weights_hash": self.weights_hash,
            "spatial_calls": self.spatial_calls,
            "resampled": [
                {"frame": int(f), "candidates": [float(c) for c in cs], "selected": None if s is None else float(s)}
                for f, cs, s in zip(self.resampled_index, self.candidates, self.selected)
            ],
            "frames": [
                {"frame": int(f), "probability": float(p), "label": int(lab), "edf": bool(e)}
                for f, p, lab, e in zip(self.frame_index, self.probabilities, self.labels, self.edf)
            ],
        }
        if include_timings:
            d["timings"] = dict(self.timings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PredictionTrace:
        try:
            res, frames = d["resampled"], d["frames"]
            return cls(
                sequence_id=d["sequence_id"],
                interval=tuple(d["interval"]),
                resampled_index=[r["frame"] for r in res],
                candidates=[r["candidates"] for r in res],
                selected=[r["selected"] for r in res],
                frame_index=[f["frame"] for f in frames],
                probabilities=[f["probability"] for f in frames],
                labels=[f["label"] for f in frames],
                edf=[f["edf"] for f in frames],
                spatial_calls=d.get("spatial_calls", 0),
                timings=d.get("timings", {}),
                weights_hash=d.get("weights_hash", ""),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed prediction trace: missing {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> PredictionTrace:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def edf_frames(self) -> list[int]:
        return [int(f) for f, e in zip(self.frame_index, self.edf) if e]


# -- training -----------------------------------------------------------------

def augment_sequence(frames: np.ndarray, rng: np.random.Generator, config: PhaseNetConfig) -> np.ndarray:
    """Flip, rotation and intensity scaling drawn once and applied to every frame."""
    out = frames
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    if config.rotation_deg > 0 and abs(angle) > 1e-3:
        out = rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
    scale = 1.0 + rng.uniform(-config.intensity, config.intensity)
    return np.ascontiguousarray(out * scale, dtype=frames.dtype)


def sequence_step(net: PhaseNet, params: ParamStore, frames: np.ndarray, labels: np.ndarray, rng) -> float:
    """Forward and backward over every window of one sequence; returns the mean loss.

    Frame features are computed once and window gradients are scatter-added
    back onto them before the spatial backward pass.
    """
    feats, s_tape = net.spatial_features(params, frames, "train")
    windows = feature_windows(feats)
    n = len(windows)
    # the loss is taken on logits, so the final sigmoid is folded into it
    logits, h_tape = forward(net.head[:-1], params, windows, "train", rng)
    targets = sliding_window_view(labels, N_TARGETS)[TARGET_OFFSET:TARGET_OFFSET + n]
    loss, gz = phase_loss_logits(logits, targets, net.config.correct_weight)
    gw = backward(h_tape, (gz / gz.size).astype(logits.dtype))
    gf = np.zeros_like(feats)
    for o in range(WINDOW):
        gf[o:o + n] += gw[:, o]
    backward(s_tape, gf, input_grad=False)
    return float(loss.mean())


@dataclass
class PhaseModel:
    config: PhaseNetConfig
    params: ParamStore
    history: list = field(default_factory=list)
    net: PhaseNet = field(init=False, repr=False)

    def __post_init__(self):
        self.net = PhaseNet(self.config)

    @property
    def weights_hash(self) -> str:
        return self.config.architecture_hash()

    def save(self, path) -> None:
        meta = {"kind": "phasenet", "config": self.config.to_dict(), "config_hash": self.weights_hash,
                "history": [float(h) for h in self.history]}
        save_params(self.params, path, meta)

    @classmethod
    def load(cls, path) -> PhaseModel:
        params, meta = load_params(path)
        if meta.get("kind") != "phasenet":
            raise FormatError(f"{path} does not hold phase-net weights")
        config = PhaseNetConfig(**meta["config"])
        if meta.get("config_hash") != config.architecture_hash():
            raise FormatError(f"{path}: architecture hash does not match its config")
        return cls(config, params, list(meta.get("history", [])))


def train_phasenet(datasets, config: PhaseNetConfig | None = None, callback=None) -> PhaseModel:
    """Train on a list of per-sequence :class:`WindowDataset` objects.

    One Adam step per sequence and epoch; the sequence order is shuffled with
    the config seed. ``callback(epoch, loss)`` is called after each epoch.
    """
    config = config or PhaseNetConfig()
    config.validate()
    if isinstance(datasets, WindowDataset):
        datasets = [datasets]
    datasets = [d for d in datasets if len(d) > 0]
    if not datasets:
        raise EmptyDataset("phase-net training needs at least one sequence with a full window")
    dtype = np.dtype(config.dtype)
    seqs = []
    for d in datasets:
        frames = np.asarray(d.frames, dtype=dtype)
        if frames.shape[1:] != (config.resolution, config.resolution):
            raise ShapeError(f"training frames must be {config.resolution}x{config.resolution}, got {frames.shape[1:]}")
        if config.center:
            frames = center_frames(frames)
        seqs.append((frames, np.asarray(d.labels, dtype=dtype)))
    rng = np.random.default_rng(config.seed)
    net = PhaseNet(config)
    params = net.init(rng, dtype)
    state = AdamState(lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for k in rng.permutation(len(seqs)):
            frames, labels = seqs[k]
            if config.augment:
                frames = augment_sequence(frames, rng, config)
            n = len(frames) - WINDOW + 1
            total += sequence_step(net, params, frames, labels, rng) * n
            count += n
            adam_step(params, state)
        history.append(total / count)
        logger.info("phase-net epoch %d loss %.4f", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return PhaseModel(config, params, history)
