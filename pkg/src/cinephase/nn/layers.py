"""Layer catalogue and the taped forward / reverse-mode backward passes.

Arrays are plain numpy arrays. Images are NCHW, temporal feature matrices are
(N, T, C). A network is a sequence of layer specs; parameters live in a
:class:`~cinephase.nn.params.ParamStore` under ``"<layer name>.<kind>"`` keys,
so the specs themselves are immutable and can be shared between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import NumericError, ShapeError, StateError
from .params import ParamStore


class Layer:
    name: str | None = None

    def output_shape(self, shape: tuple) -> tuple:
        raise NotImplementedError

    def init(self, rng: np.random.Generator, dtype) -> dict:
        return {}

    def forward(self, params: ParamStore, x, train: bool, rng):
        raise NotImplementedError

    def backward(self, params: ParamStore, cache, gy, need_input: bool = True):
        raise NotImplementedError

    def _key(self, kind: str) -> str:
        return f"{self.name}.{kind}"

    def _fail(self, msg: str):
        raise ShapeError(f"{self!r}: {msg}")


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@dataclass(frozen=True)
class Conv2D(Layer):
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int | str = "same"
    name: str | None = None

    @property
    def pad(self) -> int:
        if self.padding == "same":
            return self.kernel // 2
        if self.padding == "valid":
            return 0
        return int(self.padding)

    def output_shape(self, shape):
        if len(shape) != 4 or shape[1] != self.in_ch:
            self._fail(f"expected (N, {self.in_ch}, H, W), got {tuple(shape)}")
        ho = _conv_out(shape[2], self.kernel, self.stride, self.pad)
        wo = _conv_out(shape[3], self.kernel, self.stride, self.pad)
        if ho < 1 or wo < 1:
            self._fail(f"input {tuple(shape)} too small for kernel {self.kernel}")
        return (shape[0], self.out_ch, ho, wo)

    def init(self, rng, dtype):
        fan_in = self.in_ch * self.kernel * self.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.out_ch, self.in_ch, self.kernel, self.kernel))
        return {"weight": w.astype(dtype), "bias": np.zeros(self.out_ch, dtype)}

    def forward(self, params, x, train, rng):
        n, _, ho, wo = self.output_shape(x.shape)
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        wmat = params[self._key("weight")].reshape(self.out_ch, -1)
        y = cols @ wmat.T
        y += params[self._key("bias")]
        y = np.ascontiguousarray(y.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2))
        return y, (cols, xp.shape, x.shape)

    def backward(self, params, cache, gy, need_input=True):
        cols, padded_shape, in_shape = cache
        k, s, p = self.kernel, self.stride, self.pad
        n, _, ho, wo = gy.shape
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        w = params[self._key("weight")]
        params.accumulate(self._key("weight"), (g2.T @ cols).reshape(w.shape))
        params.accumulate(self._key("bias"), g2.sum(axis=0))
        if not need_input:
            return None
        if s == 1 and 2 * p <= k - 1 and self.out_ch <= self.in_ch:
            # stride 1: input gradient is the correlation of the padded upstream
            # gradient with the flipped kernel, cropped to the unpadded input
            q = k - 1 - p
            gp = np.pad(gy, ((0, 0), (0, 0), (q, q), (q, q))) if q else gy
            h, wd = in_shape[2], in_shape[3]
            win = sliding_window_view(gp, (k, k), axis=(2, 3))[:, :, :h, :wd]
            cols2 = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, -1)
            wmat2 = w[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(-1, self.in_ch)
            gx = (cols2 @ wmat2).reshape(n, h, wd, self.in_ch).transpose(0, 3, 1, 2)
            return np.ascontiguousarray(gx)
        gcols = (g2 @ w.reshape(self.out_ch, -1)).reshape(n, ho, wo, self.in_ch, k, k)
        gxp = np.zeros(padded_shape, dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if p:
            gxp = gxp[:, :, p:p + in_shape[2], p:p + in_shape[3]]
        return gxp


@dataclass(frozen=True)
class MaxPool2D(Layer):
    """Max pooling; ties go to the first element of the window in row-major order."""

    kernel: int = 2
    stride: int = 2

    def output_shape(self, shape):
        if len(shape) != 4:
            self._fail(f"expected (N, C, H, W), got {tuple(shape)}")
        ho = _conv_out(shape[2], self.kernel, self.stride, 0)
        wo = _conv_out(shape[3], self.kernel, self.stride, 0)
        if ho < 1 or wo < 1:
            self._fail(f"input {tuple(shape)} smaller than pooling window {self.kernel}")
        return (shape[0], shape[1], ho, wo)

    def _windows(self, x, ho, wo):
        n, c = x.shape[:2]
        k, s = self.kernel, self.stride
        if k == s and x.shape[2] == ho * k and x.shape[3] == wo * k:
            r = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
            return r.reshape(n, c, ho, wo, k * k)
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        return win.reshape(n, c, ho, wo, k * k)

    def forward(self, params, x, train, rng):
        n, c, ho, wo = self.output_shape(x.shape)
        win = self._windows(x, ho, wo)
        if not train:
            return win.max(axis=-1), None
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, params, cache, gy, need_input=True):
        arg, in_shape = cache
        k, s = self.kernel, self.stride
        n, c, ho, wo = gy.shape
        if k == s and in_shape[2] == ho * k and in_shape[3] == wo * k:
            g = np.zeros((n, c, ho, wo, k * k), dtype=gy.dtype)
            np.put_along_axis(g, arg[..., None], gy[..., None], axis=-1)
            g = g.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
            return np.ascontiguousarray(g).reshape(in_shape)
        gx = np.zeros(in_shape, dtype=gy.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gy * (arg == idx)
        return gx


@dataclass(frozen=True)
class Upsample2D(Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    factor: int = 2

    def output_shape(self, shape):
        if len(shape) != 4:
            self._fail(f"expected (N, C, H, W), got {tuple(shape)}")
        return (shape[0], shape[1], shape[2] * self.factor, shape[3] * self.factor)

    def forward(self, params, x, train, rng):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3), None

    def backward(self, params, cache, gy, need_input=True):
        n, c, h, w = gy.shape
        f = self.factor
        return gy.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))


@dataclass(frozen=True)
class Dense(Layer):
    """Fully connected layer ``y = x W^T + b``; trailing input dims are flattened."""

    in_features: int
    out_features: int
    name: str | None = None

    def output_shape(self, shape):
        if len(shape) < 2 or int(np.prod(shape[1:])) != self.in_features:
            self._fail(f"expected {self.in_features} features per sample, got shape {tuple(shape)}")
        return (shape[0], self.out_features)

    def init(self, rng, dtype):
        w = rng.normal(0.0, np.sqrt(2.0 / self.in_features), (self.out_features, self.in_features))
        return {"weight": w.astype(dtype), "bias": np.zeros(self.out_features, dtype)}

    def forward(self, params, x, train, rng):
        self.output_shape(x.shape)
        x2 = x.reshape(x.shape[0], -1)
        y = x2 @ params[self._key("weight")].T + params[self._key("bias")]
        return y, (x2, x.shape)

    def backward(self, params, cache, gy, need_input=True):
        x2, in_shape = cache
        params.accumulate(self._key("weight"), gy.T @ x2)
        params.accumulate(self._key("bias"), gy.sum(axis=0))
        return (gy @ params[self._key("weight")]).reshape(in_shape)


@dataclass(frozen=True)
class DepthwiseConv1D(Layer):
    """Per-channel temporal convolution with valid padding over (N, T, C) input."""

    channels: int
    kernel: int = 3
    name: str | None = None

    def output_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.channels:
            self._fail(f"expected (N, T, {self.channels}), got {tuple(shape)}")
        if shape[1] < self.kernel:
            self._fail(f"sequence length {shape[1]} shorter than kernel {self.kernel}")
        return (shape[0], shape[1] - self.kernel + 1, self.channels)

    def init(self, rng, dtype):
        w = rng.normal(0.0, np.sqrt(1.0 / self.kernel), (self.channels, self.kernel))
        return {"weight": w.astype(dtype), "bias": np.zeros(self.channels, dtype)}

    def forward(self, params, x, train, rng):
        _, t_out, _ = self.output_shape(x.shape)
        w = params[self._key("weight")]
        y = np.zeros((x.shape[0], t_out, self.channels), dtype=np.result_type(x, w))
        for j in range(self.kernel):
            y += x[:, j:j + t_out, :] * w[:, j]
        y += params[self._key("bias")]
        return y, x

    def backward(self, params, cache, gy, need_input=True):
        x = cache
        t_out = gy.shape[1]
        w = params[self._key("weight")]
        gw = np.empty_like(w)
        gx = np.zeros_like(x, dtype=gy.dtype)
        for j in range(self.kernel):
            gw[:, j] = np.einsum("ntc,ntc->c", gy, x[:, j:j + t_out, :])
            gx[:, j:j + t_out, :] += gy * w[:, j]
        params.accumulate(self._key("weight"), gw)
        params.accumulate(self._key("bias"), gy.sum(axis=(0, 1)))
        return gx


@dataclass(frozen=True)
class ReLU(Layer):
    """Rectifier; the subgradient at exactly 0 is taken as 0."""

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, params, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, gy, need_input=True):
        return gy * cache


@dataclass(frozen=True)
class Sigmoid(Layer):
    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, params, x, train, rng):
        y = expit(x)
        return y, y

    def backward(self, params, cache, gy, need_input=True):
        return gy * cache * (1.0 - cache)


@dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout; identity outside training mode."""

    rate: float = 0.5

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, params, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise StateError(f"{self!r}: training-mode dropout needs a random generator")
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, params, cache, gy, need_input=True):
        return gy if cache is None else gy * cache


def output_shape(layers: Sequence[Layer], shape: tuple) -> tuple:
    """Propagate ``shape`` through the catalogue rules without running anything."""
    for layer in layers:
        shape = layer.output_shape(tuple(shape))
    return tuple(shape)


def init_params(layers: Sequence[Layer], rng: np.random.Generator, dtype=np.float64, params=None) -> ParamStore:
    params = ParamStore() if params is None else params
    for layer in layers:
        for kind, value in layer.init(rng, dtype).items():
            params.add(layer._key(kind), value)
    return params


@dataclass
class Tape:
    """Intermediates recorded by a training-mode forward pass."""

    layers: Sequence[Layer]
    params: ParamStore
    caches: list = field(default_factory=list)
    out_shape: tuple = ()


def forward(layers: Sequence[Layer], params: ParamStore, x: np.ndarray, mode: str = "infer", rng=None):
    """Run ``x`` through ``layers``.

    Returns ``(output, tape)``; the tape is ``None`` in ``"infer"`` mode and
    must be handed to :func:`backward` in ``"train"`` mode.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    tape = Tape(layers, params) if train else None
    for layer in layers:
        x, cache = layer.forward(params, x, train, rng)
        if not np.isfinite(x).all():
            raise NumericError(f"{layer!r} produced non-finite activations")
        if train:
            tape.caches.append(cache)
    if train:
        tape.out_shape = x.shape
    return x, tape


def backward(tape: Tape | None, upstream: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
    """Accumulate parameter gradients into ``tape.params`` and return the input gradient.

    With ``input_grad=False`` the first layer skips its input gradient and
    ``None`` is returned; useful when the input is data.
    """
    if tape is None or len(tape.caches) != len(tape.layers):
        raise StateError("backward requires a tape from a training-mode forward pass")
    if upstream.shape != tuple(tape.out_shape):
        raise ShapeError(f"upstream gradient shape {upstream.shape} != output shape {tape.out_shape}")
    g = upstream
    last = len(tape.layers) - 1
    for i, (layer, cache) in enumerate(zip(reversed(tape.layers), reversed(tape.caches))):
        g = layer.backward(tape.params, cache, g, need_input=input_grad or i < last)
    return g
