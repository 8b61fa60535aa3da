"""Network building blocks operating on NCHW tensors.

The distinctive pieces are the block-local dense layer (one weight matrix
shared by every tile of the feature map), the mean-pool chroma reduction,
and the rounding layer whose backward is the straight-through 1/Q scale.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .jpeg import mode_factors
from .tensor import Tensor

__all__ = [
    "he_uniform",
    "Linear",
    "Conv2d",
    "LocallyConnected",
    "ChromaSubsample",
    "Quantization",
    "ResidualBlock",
]


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> Tensor:
    """Fan-in scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = float(np.sqrt(6.0 / fan_in))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data.astype(dtype or T.get_default_dtype()), requires_grad=True)


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.w = he_uniform(rng, (in_features, out_features), in_features)
        self.b = T.zeros((out_features,), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        out = T.matmul(x, self.w)
        return T.add(out, T.expand(T.reshape(self.b, (1, self.out_features)), (n, self.out_features)))


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, padding: int | None = None):
        self.k = k
        self.padding = (k - 1) // 2 if padding is None else padding
        self.w = he_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k)
        self.b = T.zeros((out_ch,), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=1, padding=self.padding)


class LocallyConnected:
    """Dense map applied independently to every (bh x bw) tile of the input.

    One weight matrix of shape (bh*bw*in_ch, bh*bw*out_ch) is shared by all
    tiles; tiles are flattened in (channel, row, col) order.  With 1x1 tiles
    this is exactly a 1x1 convolution.
    """

    def __init__(self, block_h: int, block_w: int, in_ch: int, out_ch: int, rng: np.random.Generator):
        if block_h < 1 or block_w < 1:
            raise ValueError("block extents must be positive")
        self.block_h = block_h
        self.block_w = block_w
        self.in_ch = in_ch
        self.out_ch = out_ch
        fan_in = block_h * block_w * in_ch
        self.w = he_uniform(rng, (fan_in, block_h * block_w * out_ch), fan_in)
        self.b = T.zeros((block_h * block_w * out_ch,), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        bh, bw = self.block_h, self.block_w
        if c != self.in_ch:
            raise T.ShapeError(f"expected {self.in_ch} channels, got {c}")
        if h % bh or w % bw:
            raise T.ShapeError(f"{h}x{w} input not tiled by {bh}x{bw} blocks")
        th, tw = h // bh, w // bw
        tiles = T.reshape(x, (n, c, th, bh, tw, bw))
        tiles = T.permute(tiles, (0, 2, 4, 1, 3, 5))           # n, th, tw, c, bh, bw
        flat = T.reshape(tiles, (n * th * tw, c * bh * bw))
        out = T.matmul(flat, self.w)
        cols = self.out_ch * bh * bw
        out = T.add(out, T.expand(T.reshape(self.b, (1, cols)), (n * th * tw, cols)))
        out = T.reshape(out, (n, th, tw, self.out_ch, bh, bw))
        out = T.permute(out, (0, 3, 1, 4, 2, 5))               # n, co, th, bh, tw, bw
        return T.reshape(out, (n, self.out_ch, h, w))


class ChromaSubsample:
    """Block-mean downsampling by the subsampling mode's factors.

    Arithmetic is the same reduction the codec's plane subsampler performs,
    so the learned path and the reference path see identical values.
    """

    def __init__(self, mode: str):
        self.mode = mode
        self.fv, self.fh = mode_factors(mode)

    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        if self.fv == self.fh == 1:
            return x
        return T.avg_pool2d(x, self.fv, self.fh)


class Quantization:
    """Divide amplitudes by the 8x8 quantization matrix (tiled over the
    plane) and round half away from zero.

    Rounding is a step function, so the backward substitutes the straight
    -through estimate: the gradient of output w.r.t. input is exactly the
    elementwise 1/Q of the dividing step.
    """

    def __init__(self, q_matrix: np.ndarray):
        q = np.asarray(q_matrix, dtype=np.float64)
        if q.shape != (8, 8) or np.any(q < 1):
            raise ValueError("need an 8x8 matrix with entries >= 1")
        self.q = q

    def params(self) -> dict[str, Tensor]:
        return {}

    def tiled(self, h: int, w: int, dtype) -> np.ndarray:
        if h % 8 or w % 8:
            raise T.ShapeError(f"plane {h}x{w} not divisible by 8")
        return np.tile(self.q, (h // 8, w // 8)).astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        inv = Tensor(1.0 / self.tiled(h, w, x.data.dtype))
        scaled = T.mul(x, T.expand(T.reshape(inv, (1, 1, h, w)), (n, c, h, w)))
        return T.round_ste(scaled)


class ResidualBlock:
    """Two 3x3 convs (ReLU between) plus a 1x1 conv skip.

    `resample` applies the same 2x change to both paths: "up" is
    nearest-neighbor upsampling before the convs, "down" is mean pooling
    after them.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, resample: str | None = None):
        if resample not in (None, "up", "down"):
            raise ValueError(f"bad resample {resample!r}")
        self.resample = resample
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng)
        self.skip = Conv2d(in_ch, out_ch, 1, rng)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("conv1", self.conv1), ("conv2", self.conv2), ("skip", self.skip)):
            for k, v in layer.params().items():
                out[f"{name}.{k}"] = v
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = T.upsample_repeat2d(x, 2, 2) if self.resample == "up" else x
        main = self.conv2.forward(T.relu(self.conv1.forward(h)))
        skip = self.skip.forward(h)
        if self.resample == "down":
            main = T.avg_pool2d(main, 2, 2)
            skip = T.avg_pool2d(skip, 2, 2)
        return T.add(main, skip)
