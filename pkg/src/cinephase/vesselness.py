"""Vessel visibility scoring and contrast-filled frame interval selection.

A small encoder-decoder segmenter maps a frame to a per-pixel vessel
probability map; the frame's vesselness score is the sum of that map. Frames
scoring below two thirds of the sequence maximum are discarded and the
longest remaining run of consecutive frames is kept.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyDataset, FormatError, ShapeError, StateError
from .nn import (
    AdamState,
    Conv2D,
    MaxPool2D,
    ParamStore,
    ReLU,
    Sigmoid,
    Upsample2D,
    adam_step,
    backward,
    config_hash,
    forward,
    init_params,
    load_params,
    save_params,
)
from .preprocess import resize_mask

logger = logging.getLogger(__name__)

INTERVAL_FRACTION = 2.0 / 3.0


@dataclass
class CenterlineAnnotation:
    """Vessel centrelines; each vessel is an (n, 3) array of ``x, y, radius`` in pixels."""

    vessels: list = field(default_factory=list)

    def __post_init__(self):
        self.vessels = [np.asarray(v, dtype=np.float64).reshape(-1, 3) for v in self.vessels]
        for v in self.vessels:
            if np.any(v[:, 2] < 0):
                raise ValueError("vessel radii must be non-negative")

    def to_dict(self) -> dict:
        return {"vessels": [{"points": [[float(a) for a in p] for p in v]} for v in self.vessels]}

    @classmethod
    def from_dict(cls, d: dict) -> CenterlineAnnotation:
        return cls([np.asarray(v["points"], dtype=np.float64) for v in d.get("vessels", [])])


def rasterize_mask(ann: CenterlineAnnotation, width: int, height: int) -> np.ndarray:
    """Binary mask of every pixel within its nearest centreline point's radius.

    Pixel ``(row, col)`` has its centre at ``x = col, y = row``; it is set iff
    some point ``p`` has ``dist(pixel, p) <= radius(p)``.
    """
    mask = np.zeros((height, width), dtype=bool)
    if not ann.vessels:
        return mask
    pts = np.concatenate(ann.vessels, axis=0)
    if len(pts) == 0:
        return mask
    reach = int(np.ceil(pts[:, 2].max())) + 1
    off = np.arange(-reach, reach + 1)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    for chunk in np.array_split(pts, max(1, len(pts) // 512)):
        cx = np.round(chunk[:, 0]).astype(np.int64)[:, None] + dx
        cy = np.round(chunk[:, 1]).astype(np.int64)[:, None] + dy
        d2 = (cx - chunk[:, :1]) ** 2 + (cy - chunk[:, 1:2]) ** 2
        hit = (d2 <= chunk[:, 2:3] ** 2) & (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        mask[cy[hit], cx[hit]] = True
    return mask


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def jaccard_loss(p: np.ndarray, t: np.ndarray, mu: float = 0.1) -> float:
    """``1 - (mu + sum PT) / (mu + sum P^2 + sum T^2 - sum PT)``."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _check_same(p, t)
    inter = np.sum(p * t)
    # sums grouped before adding mu so that binary P == T gives exactly 0
    denom = mu + (np.sum(p * p) + np.sum(t * t) - inter)
    return float(1.0 - (mu + inter) / denom)


def jaccard_loss_grad(p: np.ndarray, t: np.ndarray, mu: float = 0.1) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``p``."""
    p = np.asarray(p)
    t = np.asarray(t, dtype=p.dtype)
    _check_same(p, t)
    inter = np.sum(p * t)
    denom = mu + (np.sum(p * p) + np.sum(t * t) - inter)
    num = mu + inter
    grad = -(t * denom - num * (2.0 * p - t)) / denom ** 2
    return float(1.0 - num / denom), grad


def vesselness_score(p: np.ndarray) -> float:
    return float(np.sum(p, dtype=np.float64))


def select_frame_interval(scores) -> tuple[int, int]:
    """Longest run of frames scoring at least 2/3 of the maximum.

    Returns an inclusive ``(start, end)`` pair; ties go to the earliest run.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty vesselness track")
    keep = s >= INTERVAL_FRACTION * s.max()
    best = (0, 0)
    best_len = 0
    start = None
    for i, k in enumerate(np.append(keep, False)):
        if k and start is None:
            start = i
        elif not k and start is not None:
            if i - start > best_len:
                best, best_len = (start, i - 1), i - start
            start = None
    return best


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2 |A & B| / (|A| + |B|)``, and 1.0 when both masks are empty."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    _check_same(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float or boolean image as an 8-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


# -- segmentation network -----------------------------------------------------

@dataclass
class VesselConfig:
    resolution: int = 32
    depth: int = 3
    base_channels: int = 8
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    mu: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    flip: bool = True

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be positive")
        if self.resolution % (2 ** (self.depth - 1)):
            raise ConfigError(f"resolution {self.resolution} is not divisible by {2 ** (self.depth - 1)}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.mu <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, lr > 0 and mu > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


class VesselNet:
    """Encoder-decoder segmenter with skip connections.

    Level ``i`` of the encoder has ``base * 2**i`` channels; every level but
    the first starts with a 2x2 max-pool. The decoder upsamples, concatenates
    the matching encoder output and convolves back down; a 1x1 convolution
    and a sigmoid give the probability map. Input is ``(N, 1, H, W)``.
    """

    def __init__(self, depth: int = 3, base_channels: int = 8):
        self.depth = depth
        ch = [base_channels * 2 ** i for i in range(depth)]
        self.channels = ch
        self.encoder = []
        for i in range(depth):
            stack = [] if i == 0 else [MaxPool2D(2)]
            stack += [Conv2D(ch[i - 1] if i else 1, ch[i], 3, name=f"enc{i}.conv"), ReLU()]
            if i == depth - 1 and depth > 1:
                stack.append(Upsample2D(2))
            self.encoder.append(stack)
        self.decoder = {}
        for j in range(depth - 2, -1, -1):
            stack = [Conv2D(ch[j + 1] + ch[j], ch[j], 3, name=f"dec{j}.conv"), ReLU()]
            if j > 0:
                stack.append(Upsample2D(2))
            self.decoder[j] = stack
        self.head = [Conv2D(ch[0], 1, 1, name="head.conv"), Sigmoid()]

    @property
    def stacks(self) -> list:
        return [*self.encoder, *self.decoder.values(), self.head]

    def init(self, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
        params = ParamStore()
        for stack in self.stacks:
            init_params(stack, rng, dtype, params)
        return params

    def forward(self, params: ParamStore, x: np.ndarray, mode: str = "infer"):
        """Returns ``(probabilities, tapes)``; ``tapes`` is ``None`` in infer mode."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"VesselNet expects (N, 1, H, W) input, got {x.shape}")
        factor = 2 ** (self.depth - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"spatial size {x.shape[2:]} is not divisible by {factor}")
        tapes = {}
        skips = []
        h = x
        for i, stack in enumerate(self.encoder):
            h, tapes[f"enc{i}"] = forward(stack, params, h, mode)
            skips.append(h)
        for j in range(self.depth - 2, -1, -1):
            h = np.concatenate([h, skips[j]], axis=1)
            h, tapes[f"dec{j}"] = forward(self.decoder[j], params, h, mode)
        p, tapes["head"] = forward(self.head, params, h, mode)
        return p, (tapes if mode == "train" else None)

    def backward(self, tapes: dict | None, grad: np.ndarray) -> None:
        """Accumulate parameter gradients for an upstream gradient on the output."""
        if tapes is None:
            raise StateError("backward requires tapes from a training-mode forward pass")
        g = backward(tapes["head"], grad)
        skip_grads = {}
        for j in range(self.depth - 1):
            g = backward(tapes[f"dec{j}"], g)
            up_ch = self.channels[j + 1]
            skip_grads[j] = g[:, up_ch:]
            g = g[:, :up_ch]
        # g now flows into the deepest encoder output
        for i in range(self.depth - 1, -1, -1):
            if i in skip_grads:
                g = g + skip_grads[i]
            g = backward(tapes[f"enc{i}"], g, input_grad=i > 0)

    def predict(self, params: ParamStore, frames: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Probability maps ``(N, H, W)`` for frames ``(N, H, W)``."""
        frames = np.asarray(frames)
        dtype = next(iter(params.values.values())).dtype
        out = np.empty(frames.shape, dtype=dtype)
        for s in range(0, len(frames), batch_size):
            x = frames[s:s + batch_size, None].astype(dtype, copy=False)
            out[s:s + batch_size] = self.forward(params, x)[0][:, 0]
        return out


def batch_jaccard(p: np.ndarray, t: np.ndarray, mu: float = 0.1) -> tuple[float, np.ndarray]:
    """Mean per-image Jaccard loss over a batch ``(N, ...)`` and its gradient."""
    n = len(p)
    losses = np.empty(n)
    grad = np.empty_like(p)
    for k in range(n):
        losses[k], grad[k] = jaccard_loss_grad(p[k], t[k], mu)
    return float(losses.mean()), grad / n


@dataclass
class VesselModel:
    config: VesselConfig
    params: ParamStore
    history: list = field(default_factory=list)

    @property
    def net(self) -> VesselNet:
        return VesselNet(self.config.depth, self.config.base_channels)

    def probability_maps(self, frames: np.ndarray) -> np.ndarray:
        """Probability maps of preprocessed frames ``(N, R, R)`` at the model resolution."""
        frames = np.asarray(frames)
        if frames.shape[1:] != (self.config.resolution,) * 2:
            raise ShapeError(f"frames must be {self.config.resolution}x{self.config.resolution}, got {frames.shape[1:]}")
        return self.net.predict(self.params, frames)

    def scores(self, frames: np.ndarray) -> np.ndarray:
        return np.array([vesselness_score(p) for p in self.probability_maps(frames)])

    def save(self, path) -> None:
        save_params(self.params, path, {"kind": "vesselness", "config": self.config.to_dict(),
                                        "config_hash": config_hash(self.config.to_dict())})

    @classmethod
    def load(cls, path) -> VesselModel:
        params, meta = load_params(path)
        if meta.get("kind") != "vesselness":
            raise FormatError(f"{path} does not hold vesselness weights")
        return cls(VesselConfig(**meta["config"]), params)


def train_vesselness(pairs, config: VesselConfig | None = None) -> VesselModel:
    """Fit the segmenter on ``(frame, mask)`` pairs with Adam and the Jaccard loss.

    Frames must already be preprocessed to ``config.resolution``; masks are
    resized to match when needed. Mini-batches are drawn in a seeded order and
    horizontally flipped at random when ``config.flip`` is set.
    """
    config = config or VesselConfig()
    config.validate()
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataset("vesselness training needs at least one (frame, mask) pair")
    res = config.resolution
    dtype = np.dtype(config.dtype)
    frames = np.empty((len(pairs), 1, res, res), dtype=dtype)
    masks = np.empty((len(pairs), 1, res, res), dtype=dtype)
    for k, (f, m) in enumerate(pairs):
        f = np.asarray(f)
        if f.shape != (res, res):
            raise ShapeError(f"training frame {k} has shape {f.shape}, expected {(res, res)}")
        frames[k, 0] = f
        masks[k, 0] = resize_mask(m, res)
    rng = np.random.default_rng(config.seed)
    net = VesselNet(config.depth, config.base_channels)
    params = net.init(rng, dtype)
    state = AdamState(lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            x, t = frames[idx], masks[idx]
            if config.flip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
                t = np.where(flip[:, None, None, None], t[..., ::-1], t)
            p, tapes = net.forward(params, x, "train")
            loss, grad = batch_jaccard(p, t, config.mu)
            net.backward(tapes, grad.astype(dtype, copy=False))
            adam_step(params, state)
            total += loss * len(idx)
        history.append(total / len(pairs))
        logger.debug("vesselness epoch %d loss %.4f", epoch, history[-1])
    return VesselModel(config, params, history)
