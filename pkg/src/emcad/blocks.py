"""Decoder building blocks: gates, channel/spatial attention, multi-scale conv.

Each block is an immutable parameter container plus a pure forward
function. ``make_*`` helpers build containers with weights drawn from a
caller-supplied ``draw(shape)`` function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ConvParams, NormParams, ShapeError

Draw = Callable[[tuple], np.ndarray]
Arrangement = Literal["parallel", "sequential"]


def make_conv(draw: Draw, cin: int, cout: int, k: int = 1, groups: int = 1,
              bias: bool = False) -> ConvParams:
    if cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide in={cin} and out={cout}")
    w = draw((cout, cin // groups, k, k))
    b = draw((cout,)) if bias else None
    return ConvParams(w, b, stride=1, padding=k // 2, groups=groups)


def _check_channels(x: np.ndarray, expected: int, what: str) -> np.ndarray:
    x = T.tensor4d(x)
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} channels, got {x.shape[1]}")
    return x


# --- attention gates -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LGAGParams:
    """Large-kernel grouped attention gate.

    ``gc_g`` projects the gating signal and ``gc_x`` the gated input to the
    intermediate width; ``psi`` collapses that to one attention channel.
    """

    gc_g: ConvParams
    bn_g: NormParams
    gc_x: ConvParams
    bn_x: NormParams
    psi: ConvParams
    bn_psi: NormParams

    def __post_init__(self):
        if self.gc_g.out_channels != self.gc_x.out_channels:
            raise ConfigError("gc_g and gc_x must share the intermediate width")
        if self.psi.out_channels != 1 or self.psi.in_channels != self.gc_g.out_channels:
            raise ConfigError("psi must map the intermediate width to one channel")

    @property
    def group_count(self) -> int:
        return self.gc_g.groups

    @property
    def intermediate(self) -> int:
        return self.gc_g.out_channels


@dataclass(frozen=True, eq=False)
class AGParams(LGAGParams):
    """Baseline attention gate: same graph as LGAG with 1x1 ungrouped projections."""

    def __post_init__(self):
        super().__post_init__()
        for conv in (self.gc_g, self.gc_x):
            if conv.kernel_size != (1, 1) or conv.groups != 1:
                raise ConfigError("AG projections must be 1x1 and ungrouped")


def make_gate(draw: Draw, f_g: int, f_l: int, f_int: int, *, kernel: int = 3,
              groups: int = 1, bias: bool = True, baseline: bool = False) -> LGAGParams:
    if baseline:
        kernel, groups = 1, 1
    cls = AGParams if baseline else LGAGParams
    return cls(
        gc_g=make_conv(draw, f_g, f_int, kernel, groups, bias),
        bn_g=NormParams.identity(f_int),
        gc_x=make_conv(draw, f_l, f_int, kernel, groups, bias),
        bn_x=NormParams.identity(f_int),
        psi=make_conv(draw, f_int, 1, 1, 1, bias=True),
        bn_psi=NormParams.identity(1),
    )


def gate_attention(p: LGAGParams, g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """The (n, 1, h, w) attention coefficients of a gate."""
    g = _check_channels(g, p.gc_g.in_channels, "gate g")
    x = _check_channels(x, p.gc_x.in_channels, "gate x")
    if g.shape[0] != x.shape[0] or g.shape[2:] != x.shape[2:]:
        raise ShapeError(f"gate inputs differ in batch/spatial dims: {g.shape} vs {x.shape}")
    q = T.relu(T.add(T.batchnorm_infer(T.conv2d(g, p.gc_g), p.bn_g),
                     T.batchnorm_infer(T.conv2d(x, p.gc_x), p.bn_x)))
    return T.sigmoid(T.batchnorm_infer(T.conv2d(q, p.psi), p.bn_psi))


def lgag_forward(p: LGAGParams, g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return T.hadamard(x, gate_attention(p, g, x))


def ag_forward(p: AGParams, g: np.ndarray, x: np.ndarray) -> np.ndarray:
    if not isinstance(p, AGParams):
        raise ConfigError("ag_forward needs AGParams")
    return T.hadamard(x, gate_attention(p, g, x))


# --- channel and spatial attention ----------------------------------------

def reduced_channels(c: int, ratio: int = 16) -> int:
    return max(1, math.ceil(c / ratio))


@dataclass(frozen=True, eq=False)
class CABParams:
    reduce: ConvParams
    expand: ConvParams

    def __post_init__(self):
        if self.reduce.kernel_size != (1, 1) or self.expand.kernel_size != (1, 1):
            raise ConfigError("CAB convolutions are point-wise")
        if self.reduce.out_channels != self.expand.in_channels:
            raise ConfigError("CAB reduce/expand widths disagree")
        if self.expand.out_channels != self.reduce.in_channels:
            raise ConfigError("CAB must restore the input width")

    @property
    def channels(self) -> int:
        return self.reduce.in_channels


def make_cab(draw: Draw, c: int, ratio: int = 16, bias: bool = True) -> CABParams:
    r = reduced_channels(c, ratio)
    return CABParams(make_conv(draw, c, r, bias=bias), make_conv(draw, r, c, bias=bias))


def cab_attention(p: CABParams, x: np.ndarray) -> np.ndarray:
    x = _check_channels(x, p.channels, "CAB")

    def branch(pooled):
        return T.conv2d(T.relu(T.conv2d(pooled, p.reduce)), p.expand)

    return T.sigmoid(T.add(branch(T.adaptive_pool_1x1(x, "max")),
                           branch(T.adaptive_pool_1x1(x, "avg"))))


def cab_forward(p: CABParams, x: np.ndarray) -> np.ndarray:
    return T.hadamard(x, cab_attention(p, x))


@dataclass(frozen=True, eq=False)
class SABParams:
    lkc: ConvParams

    def __post_init__(self):
        if self.lkc.in_channels != 2 or self.lkc.out_channels != 1:
            raise ConfigError("SAB conv maps [max, avg] (2 channels) to 1")
        k = self.lkc.kernel_size
        if k[0] != k[1] or k[0] % 2 == 0:
            raise ConfigError(f"SAB kernel must be odd and square, got {k}")


def make_sab(draw: Draw, kernel: int = 7) -> SABParams:
    return SABParams(make_conv(draw, 2, 1, kernel, bias=True))


def sab_attention(p: SABParams, x: np.ndarray) -> np.ndarray:
    x = T.tensor4d(x)
    pooled = T.concat_channels(T.channel_pool(x, "max"), T.channel_pool(x, "avg"))
    return T.sigmoid(T.conv2d(pooled, p.lkc))


def sab_forward(p: SABParams, x: np.ndarray) -> np.ndarray:
    return T.hadamard(x, sab_attention(p, x))


# --- multi-scale convolution block ----------------------------------------

@dataclass(frozen=True, eq=False)
class DWCB:
    """Depth-wise conv, batch norm, ReLU6."""

    conv: ConvParams
    bn: NormParams

    def __post_init__(self):
        c = self.conv.in_channels
        if not (self.conv.groups == c == self.conv.out_channels):
            raise ConfigError("DWCB conv must be depth-wise")
        if self.bn.channels != c:
            raise ConfigError("DWCB batch-norm width mismatch")


def default_shuffle_groups(expanded: int, n_kernels: int) -> int:
    return n_kernels if expanded % n_kernels == 0 else math.gcd(expanded, n_kernels)


@dataclass(frozen=True, eq=False)
class MSCBParams:
    pwc1: ConvParams
    bn1: NormParams
    dwcbs: tuple[DWCB, ...]
    pwc2: ConvParams
    bn2: NormParams
    shuffle_groups: int = 1
    arrangement: Arrangement = "parallel"

    def __post_init__(self):
        object.__setattr__(self, "dwcbs", tuple(self.dwcbs))
        if not self.dwcbs:
            raise ConfigError("MSCB needs at least one kernel size")
        e = self.pwc1.out_channels
        for d in self.dwcbs:
            k = d.conv.kernel_size
            if d.conv.in_channels != e or k[0] != k[1] or k[0] % 2 == 0:
                raise ConfigError("MSDC branches must be odd square depth-wise convs at the expanded width")
        if self.pwc2.in_channels != e:
            raise ConfigError("pwc2 must read the expanded width")
        if self.arrangement not in ("parallel", "sequential"):
            raise ConfigError(f"unknown MSDC arrangement {self.arrangement!r}")
        if e % self.shuffle_groups:
            raise ConfigError(f"shuffle groups {self.shuffle_groups} must divide {e}")

    @property
    def kernel_sizes(self) -> tuple[int, ...]:
        return tuple(d.conv.kernel_size[0] for d in self.dwcbs)

    @property
    def expanded(self) -> int:
        return self.pwc1.out_channels


def make_mscb(draw: Draw, cin: int, cout: int, kernel_sizes: Sequence[int] = (1, 3, 5),
              expansion: int = 2, arrangement: Arrangement = "parallel",
              shuffle_groups: int | None = None) -> MSCBParams:
    e = int(cin * expansion)
    if shuffle_groups is None:
        shuffle_groups = default_shuffle_groups(e, len(kernel_sizes))
    return MSCBParams(
        pwc1=make_conv(draw, cin, e),
        bn1=NormParams.identity(e),
        dwcbs=tuple(DWCB(make_conv(draw, e, e, k, groups=e), NormParams.identity(e))
                    for k in kernel_sizes),
        pwc2=make_conv(draw, e, cout),
        bn2=NormParams.identity(cout),
        shuffle_groups=shuffle_groups,
        arrangement=arrangement,
    )


def dwcb_forward(d: DWCB, x: np.ndarray) -> np.ndarray:
    return T.relu6(T.batchnorm_infer(T.conv2d(x, d.conv), d.bn))


def msdc_forward(p: MSCBParams, x: np.ndarray) -> np.ndarray:
    x = _check_channels(x, p.expanded, "MSDC")
    if p.arrangement == "parallel":
        out = dwcb_forward(p.dwcbs[0], x)
        for d in p.dwcbs[1:]:
            out = T.add(out, dwcb_forward(d, x))
        return out
    for d in p.dwcbs:
        x = T.add(x, dwcb_forward(d, x))
    return x


def mscb_forward(p: MSCBParams, x: np.ndarray) -> np.ndarray:
    x = _check_channels(x, p.pwc1.in_channels, "MSCB")
    h = T.relu6(T.batchnorm_infer(T.conv2d(x, p.pwc1), p.bn1))
    h = T.channel_shuffle(msdc_forward(p, h), p.shuffle_groups)
    return T.batchnorm_infer(T.conv2d(h, p.pwc2), p.bn2)


@dataclass(frozen=True, eq=False)
class MSCAMParams:
    cab: CABParams
    sab: SABParams
    mscb: MSCBParams


def mscam_forward(cab: CABParams, sab: SABParams, mscb: MSCBParams, x: np.ndarray) -> np.ndarray:
    return mscb_forward(mscb, sab_forward(sab, cab_forward(cab, x)))


# --- up-convolution and head ----------------------------------------------

@dataclass(frozen=True, eq=False)
class EUCBParams:
    dwc: ConvParams
    bn: NormParams
    proj: ConvParams
    upsample_mode: Literal["nearest", "bilinear"] = "nearest"

    def __post_init__(self):
        c = self.dwc.in_channels
        if not (self.dwc.groups == c == self.dwc.out_channels):
            raise ConfigError("EUCB conv must be depth-wise")
        if self.proj.in_channels != c or self.proj.kernel_size != (1, 1):
            raise ConfigError("EUCB projection must be 1x1 from the block width")


def make_eucb(draw: Draw, cin: int, cout: int, kernel: int = 3,
              upsample_mode: str = "nearest") -> EUCBParams:
    return EUCBParams(
        dwc=make_conv(draw, cin, cin, kernel, groups=cin),
        bn=NormParams.identity(cin),
        proj=make_conv(draw, cin, cout, 1, bias=True),
        upsample_mode=upsample_mode,
    )


def eucb_forward(p: EUCBParams, x: np.ndarray) -> np.ndarray:
    x = _check_channels(x, p.dwc.in_channels, "EUCB")
    up = T.upsample2x(x, p.upsample_mode)
    return T.conv2d(T.relu(T.batchnorm_infer(T.conv2d(up, p.dwc), p.bn)), p.proj)


def seg_head_forward(p: ConvParams, x: np.ndarray) -> np.ndarray:
    if p.kernel_size != (1, 1):
        raise ConfigError("segmentation head must be 1x1")
    x = _check_channels(x, p.in_channels, "segmentation head")
    return T.conv2d(x, p)
