"""Dense NCHW tensor kernels.

Activations are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``
and dtype float32. Reductions and convolutions accumulate in float64 and
cast the result back to float32, so outputs are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

DTYPE = np.float32
_ACC = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """Invalid layer or decoder configuration."""


def tensor4d(data, *, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as an NCHW float32 tensor and return it."""
    arr = np.array(data, dtype=DTYPE, copy=copy) if copy else np.asarray(data, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-d NCHW tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
    return arr


def flat_index(shape: tuple[int, int, int, int], b: int, ch: int, y: int, x: int) -> int:
    _, c, h, w = shape
    return b * (c * h * w) + ch * (h * w) + y * w + x


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=DTYPE)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ConvParams:
    """Weights of one 2-d convolution.

    ``weight`` has shape ``(out_channels, in_channels // groups, kh, kw)``.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = _frozen(self.weight)
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got {w.shape}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = _frozen(self.bias).reshape(-1)
            if b.shape[0] != w.shape[0]:
                raise ShapeError(f"bias length {b.shape[0]} != out_channels {w.shape[0]}")
            object.__setattr__(self, "bias", b)
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ConfigError("stride and groups must be >= 1, padding >= 0")
        if w.shape[0] % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide out_channels={w.shape[0]}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def num_params(self) -> int:
        oc, icg, kh, kw = self.weight.shape
        return oc * icg * kh * kw + (oc if self.bias is not None else 0)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        oh_num = h + 2 * self.padding - kh
        ow_num = w + 2 * self.padding - kw
        if oh_num < 0 or ow_num < 0:
            raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
        return oh_num // self.stride + 1, ow_num // self.stride + 1


@dataclass(frozen=True, eq=False)
class NormParams:
    """Inference-mode batch-norm state for ``len(gamma)`` channels."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrays = {}
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arrays[name] = _frozen(getattr(self, name)).reshape(-1)
            object.__setattr__(self, name, arrays[name])
        n = {a.shape[0] for a in arrays.values()}
        if len(n) != 1:
            raise ShapeError("batch-norm vectors must share one length")
        if np.any(arrays["running_var"] < 0):
            raise ConfigError("running_var must be non-negative")
        if not self.eps >= 0:
            raise ConfigError("eps must be non-negative")

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> "NormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Grouped 2-d cross-correlation; output group g reads only input group g."""
    x = tensor4d(x)
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {c}")
    if c % p.groups:
        raise ConfigError(f"groups={p.groups} does not divide in_channels={c}")
    oh, ow = p.output_hw(h, w)
    kh, kw = p.kernel_size
    s, pad, g = p.stride, p.padding, p.groups
    wt = p.weight.astype(_ACC)
    xa = x.astype(_ACC)

    if kh == kw == 1 and s == 1 and pad == 0 and g == 1:
        out = np.matmul(wt[:, :, 0, 0], xa.reshape(n, c, h * w)).reshape(n, p.out_channels, h, w)
    else:
        if pad:
            xa = np.pad(xa, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        if g == c and p.out_channels == c:
            out = _depthwise(xa, wt, oh, ow, s)
        else:
            out = _grouped_im2col(xa, wt, g, oh, ow, s)
    if p.bias is not None:
        out += p.bias.astype(_ACC)[None, :, None, None]
    return out.astype(DTYPE)


def _depthwise(xp: np.ndarray, wt: np.ndarray, oh: int, ow: int, s: int) -> np.ndarray:
    n, c = xp.shape[:2]
    kh, kw = wt.shape[2:]
    out = np.zeros((n, c, oh, ow), dtype=_ACC)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
            out += patch * wt[None, :, 0, i, j, None, None]
    return out


def _grouped_im2col(xp: np.ndarray, wt: np.ndarray, g: int, oh: int, ow: int, s: int) -> np.ndarray:
    n, c = xp.shape[:2]
    oc, icg, kh, kw = wt.shape
    ocg = oc // g
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :oh, :ow]
    # (n, g, icg, oh, ow, kh, kw) -> (n, g, oh*ow, icg*kh*kw)
    cols = win.reshape(n, g, icg, oh, ow, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    cols = cols.reshape(n, g, oh * ow, icg * kh * kw)
    wg = wt.reshape(g, ocg, icg * kh * kw).transpose(0, 2, 1)
    out = np.matmul(cols, wg)  # (n, g, oh*ow, ocg)
    return out.transpose(0, 1, 3, 2).reshape(n, oc, oh, ow)


def batchnorm_infer(x: np.ndarray, p: NormParams) -> np.ndarray:
    x = tensor4d(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"batch-norm has {p.channels} channels, input has {x.shape[1]}")
    scale = p.gamma.astype(_ACC) / np.sqrt(p.running_var.astype(_ACC) + p.eps)
    shift = p.beta.astype(_ACC) - p.running_mean.astype(_ACC) * scale
    return (x * scale[None, :, None, None] + shift[None, :, None, None]).astype(DTYPE)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), DTYPE(0))


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=DTYPE), DTYPE(0), DTYPE(6))


def sigmoid(x: np.ndarray) -> np.ndarray:
    xa = np.asarray(x, dtype=_ACC)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xa))
    return np.where(xa >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)


PoolMode = Literal["max", "avg"]


def adaptive_pool_1x1(x: np.ndarray, mode: PoolMode = "avg") -> np.ndarray:
    """Global spatial pooling to shape ``(n, c, 1, 1)``."""
    x = tensor4d(x)
    if mode == "max":
        return x.max(axis=(2, 3), keepdims=True)
    if mode == "avg":
        return x.astype(_ACC).mean(axis=(2, 3), keepdims=True).astype(DTYPE)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def channel_pool(x: np.ndarray, mode: PoolMode = "avg") -> np.ndarray:
    """Per-pixel reduction across channels to shape ``(n, 1, h, w)``."""
    x = tensor4d(x)
    if mode == "max":
        return x.max(axis=1, keepdims=True)
    if mode == "avg":
        return x.astype(_ACC).mean(axis=1, keepdims=True).astype(DTYPE)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the half-pixel (align_corners=False) convention."""
    x = tensor4d(x)
    h, w = x.shape[2:]
    y0, y1, wy = _bilinear_axis(h, out_h)
    x0, x1, wx = _bilinear_axis(w, out_w)
    xa = x.astype(_ACC)
    rows = xa[:, :, y0, :] * (1 - wy)[:, None] + xa[:, :, y1, :] * wy[:, None]
    out = rows[:, :, :, x0] * (1 - wx) + rows[:, :, :, x1] * wx
    return out.astype(DTYPE)


def _bilinear_axis(size: int, out: int):
    scale = size / out
    src = np.maximum((np.arange(out, dtype=_ACC) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, src - i0


def upsample2x(x: np.ndarray, mode: Literal["nearest", "bilinear"] = "nearest") -> np.ndarray:
    x = tensor4d(x)
    if mode == "nearest":
        return x.repeat(2, axis=2).repeat(2, axis=3)
    if mode == "bilinear":
        return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])
    raise ConfigError(f"unknown upsample mode {mode!r}")


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    x = tensor4d(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"groups={groups} does not divide channels={c}")
    return x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = tensor4d(a), tensor4d(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; ``b`` may be (n,c,1,1) or (n,1,h,w) and is broadcast."""
    a, b = tensor4d(a), tensor4d(b)
    n, c, h, w = a.shape
    if b.shape not in {(n, c, h, w), (n, c, 1, 1), (n, 1, h, w)}:
        raise ShapeError(f"hadamard: cannot broadcast {b.shape} onto {a.shape}")
    return a * b


def concat_channels(*xs: np.ndarray) -> np.ndarray:
    xs = [tensor4d(x) for x in xs]
    if len({(x.shape[0],) + x.shape[2:] for x in xs}) != 1:
        raise ShapeError("concat: batch and spatial dims must match")
    return np.concatenate(xs, axis=1)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    xa = tensor4d(x).astype(_ACC)
    xa = xa - xa.max(axis=1, keepdims=True)
    e = np.exp(xa)
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE)
