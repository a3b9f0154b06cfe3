"""The four-stage cascaded decoder: configuration, construction and forward pass.

Stages are stored deepest first. A stage's ``level`` is the 0-based pyramid
index, so ``stages[0]`` (level 3, named ``stage4``) refines the 1/32-scale
feature and emits ``p1``; the last stage works at 1/4 scale and emits ``p4``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Literal, NamedTuple, Optional, Sequence

import numpy as np

from . import blocks as B
from . import tensor as T
from .tensor import ConfigError, ConvParams, NormParams, ShapeError

STANDARD_CHANNELS = (64, 128, 320, 512)
TINY_CHANNELS = (32, 64, 160, 256)
INIT_RANGE = 0.05


@dataclass(frozen=True)
class DecoderConfig:
    """Everything that fixes the decoder architecture (and hence its cost).

    ``channels`` lists stage widths shallow to deep. The gate's intermediate
    width is ``c // lgag_intermediate_divisor`` and each grouped projection
    reads ``lgag_group_width`` input channels per group.
    """

    channels: tuple[int, ...] = STANDARD_CHANNELS
    kernel_sizes: tuple[int, ...] = (1, 3, 5)
    msdc_arrangement: Literal["parallel", "sequential"] = "parallel"
    expansion_factor: int = 2
    shuffle_groups: Optional[int] = None
    cab_ratio: int = 16
    sab_kernel: int = 7
    eucb_kernel: int = 3
    lgag_kernel: int = 3
    # defaults from calibrate_gate() against the 11.01K gate budget, see cost.py
    lgag_intermediate_divisor: int = 2
    lgag_group_width: int = 2
    lgag_bias: bool = True
    gate: Literal["lgag", "ag"] = "lgag"
    gate_target: Literal["skip", "upsampled"] = "skip"
    num_classes: int = 1
    use_lgag: bool = True
    use_mscam: bool = True
    cascaded: bool = True
    upsample_mode: Literal["nearest", "bilinear"] = "nearest"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        self.validate()

    def validate(self) -> None:
        ch = self.channels
        if len(ch) != 4:
            raise ConfigError(f"expected four stage widths, got {len(ch)}")
        if any(c < 1 for c in ch):
            raise ConfigError(f"stage widths must be positive, got {ch}")
        if any(a >= b for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"stage widths must strictly increase with depth, got {ch}")
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"kernel sizes must be odd and positive, got {self.kernel_sizes}")
        if self.msdc_arrangement not in ("parallel", "sequential"):
            raise ConfigError(f"unknown msdc_arrangement {self.msdc_arrangement!r}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.gate not in ("lgag", "ag"):
            raise ConfigError(f"unknown gate {self.gate!r}")
        if self.gate_target not in ("skip", "upsampled"):
            raise ConfigError(f"unknown gate_target {self.gate_target!r}")
        for name in ("expansion_factor", "cab_ratio", "num_classes", "sab_kernel", "eucb_kernel",
                     "lgag_kernel", "lgag_intermediate_divisor", "lgag_group_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.use_lgag and not self.cascaded:
            raise ConfigError("use_lgag requires cascaded=True (the gate needs a decoder signal)")
        if self.use_lgag and self.gate == "lgag":
            for c in ch[:-1]:
                self.gate_geometry(c)

    def gate_geometry(self, c: int) -> tuple[int, int]:
        """(intermediate width, group count) of the gate at width ``c``."""
        f_int = c // self.lgag_intermediate_divisor
        if f_int < 1 or c % self.lgag_intermediate_divisor:
            raise ConfigError(f"gate divisor {self.lgag_intermediate_divisor} does not divide {c}")
        if self.gate == "ag":
            return f_int, 1
        gw = self.lgag_group_width
        if c % gw or f_int % (c // gw):
            raise ConfigError(f"gate group width {gw} incompatible with width {c} -> {f_int}")
        return f_int, c // gw

    def replace(self, **changes) -> "DecoderConfig":
        return dataclasses.replace(self, **changes)


def standard_config(**overrides) -> DecoderConfig:
    return DecoderConfig(channels=STANDARD_CHANNELS, **overrides)


def tiny_config(**overrides) -> DecoderConfig:
    return DecoderConfig(channels=TINY_CHANNELS, **overrides)


@dataclass(frozen=True, eq=False)
class Stage:
    """One decoder level. ``eucb`` and ``gate`` are absent at the deepest level."""

    level: int
    channels: int
    head: ConvParams
    mscam: Optional[B.MSCAMParams] = None
    eucb: Optional[B.EUCBParams] = None
    gate: Optional[B.LGAGParams] = None


@dataclass(frozen=True, eq=False)
class Decoder:
    config: DecoderConfig
    stages: tuple[Stage, ...]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(k, v) for k, v, kind in iter_arrays(self) if kind == "param"]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(k, v) for k, v, kind in iter_arrays(self) if kind == "buffer"]

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "Decoder":
        """Copy of this decoder with the named arrays replaced."""
        out = _rebuild(self, "", arrays)
        missing = set(arrays) - {k for k, _, _ in iter_arrays(out)}
        if missing:
            raise ConfigError(f"unknown parameter names: {sorted(missing)[:3]}")
        return out


_NORM_BUFFERS = ("running_mean", "running_var")


def iter_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray, str]]:
    """Walk a parameter tree in canonical build order.

    Yields ``(dotted name, array, kind)`` where kind is ``"param"`` for
    learnable values and ``"buffer"`` for batch-norm running statistics.
    """
    if isinstance(obj, ConvParams):
        yield prefix + "weight", obj.weight, "param"
        if obj.bias is not None:
            yield prefix + "bias", obj.bias, "param"
    elif isinstance(obj, NormParams):
        yield prefix + "gamma", obj.gamma, "param"
        yield prefix + "beta", obj.beta, "param"
        for name in _NORM_BUFFERS:
            yield prefix + name, getattr(obj, name), "buffer"
    elif isinstance(obj, Decoder):
        for s in obj.stages:
            yield from iter_arrays(s, f"stage{s.level + 1}.")
    elif isinstance(obj, tuple):
        for i, item in enumerate(obj):
            yield from iter_arrays(item, f"{prefix}{i}.")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_arrays(getattr(obj, f.name), f"{prefix}{f.name}.")


def _rebuild(obj, prefix, arrays):
    if isinstance(obj, ConvParams):
        w = arrays.get(prefix + "weight", obj.weight)
        b = arrays.get(prefix + "bias", obj.bias) if obj.bias is not None else None
        if np.shape(w) != obj.weight.shape:
            raise ShapeError(f"{prefix}weight: expected {obj.weight.shape}, got {np.shape(w)}")
        return dataclasses.replace(obj, weight=w, bias=b)
    if isinstance(obj, NormParams):
        vals = {n: arrays.get(prefix + n, getattr(obj, n))
                for n in ("gamma", "beta") + _NORM_BUFFERS}
        for n, v in vals.items():
            if np.size(v) != obj.channels:
                raise ShapeError(f"{prefix}{n}: expected {obj.channels} values")
        return dataclasses.replace(obj, **vals)
    if isinstance(obj, Decoder):
        return dataclasses.replace(
            obj, stages=tuple(_rebuild(s, f"stage{s.level + 1}.", arrays) for s in obj.stages))
    if isinstance(obj, tuple):
        return tuple(_rebuild(it, f"{prefix}{i}.", arrays) for i, it in enumerate(obj))
    if dataclasses.is_dataclass(obj):
        changes = {f.name: _rebuild(getattr(obj, f.name), f"{prefix}{f.name}.", arrays)
                   for f in dataclasses.fields(obj)
                   if dataclasses.is_dataclass(getattr(obj, f.name))
                   or isinstance(getattr(obj, f.name), tuple)}
        return dataclasses.replace(obj, **changes)
    return obj


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def uniform_draw(rng: np.random.Generator, scale: float = INIT_RANGE):
    def draw(shape):
        return rng.uniform(-scale, scale, size=shape).astype(T.DTYPE)
    return draw


def build_decoder(cfg: DecoderConfig, seed: int = 0) -> Decoder:
    """Instantiate every block, deepest stage first, drawing weights in build order."""
    cfg.validate()
    draw = uniform_draw(make_rng(seed))
    ch = cfg.channels
    stages = []
    for level in range(3, -1, -1):
        c = ch[level]
        eucb = gate = None
        if cfg.cascaded and level < 3:
            eucb = B.make_eucb(draw, ch[level + 1], c, cfg.eucb_kernel, cfg.upsample_mode)
            if cfg.use_lgag:
                f_int, groups = cfg.gate_geometry(c)
                gate = B.make_gate(draw, c, c, f_int, kernel=cfg.lgag_kernel, groups=groups,
                                   bias=cfg.lgag_bias, baseline=cfg.gate == "ag")
        mscam = None
        if cfg.use_mscam:
            mscam = B.MSCAMParams(
                cab=B.make_cab(draw, c, cfg.cab_ratio),
                sab=B.make_sab(draw, cfg.sab_kernel),
                mscb=B.make_mscb(draw, c, c, cfg.kernel_sizes, cfg.expansion_factor,
                                 cfg.msdc_arrangement, cfg.shuffle_groups),
            )
        head = B.make_conv(draw, c, cfg.num_classes, 1, bias=True)
        stages.append(Stage(level=level, channels=c, head=head, mscam=mscam, eucb=eucb, gate=gate))
    return Decoder(cfg, tuple(stages))


class PyramidFeatures(NamedTuple):
    """Encoder outputs at 1/4, 1/8, 1/16 and 1/32 scale."""

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray


class PredictionMaps(NamedTuple):
    """Stage logits, deepest (``p1``, 1/32 scale) to shallowest (``p4``, 1/4 scale)."""

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    p4: np.ndarray


def check_features(cfg: DecoderConfig, f: Sequence[np.ndarray]) -> None:
    if len(f) != 4:
        raise ShapeError(f"expected four pyramid levels, got {len(f)}")
    base = None
    for i, (x, c) in enumerate(zip(f, cfg.channels), start=1):
        x = T.tensor4d(x)
        if x.shape[1] != c:
            raise ShapeError(f"stage x{i}: expected {c} channels, got {x.shape[1]}")
        if base is None:
            base = x.shape
        elif x.shape[0] != base[0] or x.shape[2] * 2 ** (i - 1) != base[2] \
                or x.shape[3] * 2 ** (i - 1) != base[3]:
            raise ShapeError(f"stage x{i}: shape {x.shape} does not halve x1 {base} per level")


def _refine(stage: Stage, x: np.ndarray) -> np.ndarray:
    if stage.mscam is None:
        return x
    m = stage.mscam
    return B.mscam_forward(m.cab, m.sab, m.mscb, x)


def _fuse(cfg: DecoderConfig, stage: Stage, u: np.ndarray, skip: np.ndarray) -> np.ndarray:
    if u.shape != skip.shape:
        raise ShapeError(f"stage x{stage.level + 1}: upsampled {u.shape} vs skip {skip.shape}")
    if stage.gate is None:
        return T.add(u, skip)
    if cfg.gate_target == "skip":
        s = B.lgag_forward(stage.gate, u, skip)
    else:
        s = B.lgag_forward(stage.gate, skip, u)
    return T.add(u, s)


def decoder_forward(dec: Decoder, f: Sequence[np.ndarray]) -> PredictionMaps:
    cfg = dec.config
    f = [T.tensor4d(x) for x in f]
    check_features(cfg, f)
    maps = []
    d = None
    for stage in dec.stages:
        x = f[stage.level]
        if stage.eucb is None:
            d = _refine(stage, x)
        else:
            u = B.eucb_forward(stage.eucb, d)
            d = _refine(stage, _fuse(cfg, stage, u, x))
        maps.append(B.seg_head_forward(stage.head, d))
    return PredictionMaps(*maps)


def activate(logits: np.ndarray) -> np.ndarray:
    """Sigmoid for one channel, per-pixel softmax otherwise."""
    if logits.shape[1] == 1:
        return T.sigmoid(logits)
    return T.softmax_channels(logits)


def aggregate_predictions(maps: Sequence[np.ndarray], target_h: int, target_w: int,
                          num_classes: Optional[int] = None) -> np.ndarray:
    """Resize every map to the target, sum the logits and activate."""
    total = None
    for p in maps:
        p = T.tensor4d(p)
        if p.shape[2] > target_h or p.shape[3] > target_w:
            raise ShapeError(f"map {p.shape} larger than target {target_h}x{target_w}")
        if num_classes is not None and p.shape[1] != num_classes:
            raise ShapeError(f"map has {p.shape[1]} channels, expected {num_classes}")
        r = T.resize_bilinear(p, target_h, target_w).astype(np.float64)
        total = r if total is None else total + r
    return activate(total.astype(T.DTYPE))


def final_map(maps: PredictionMaps, scale: int = 4) -> np.ndarray:
    """The shallowest map, upsampled to input resolution and activated."""
    p4 = T.tensor4d(maps.p4)
    return activate(T.resize_bilinear(p4, p4.shape[2] * scale, p4.shape[3] * scale))


def synth_features(cfg: DecoderConfig, input_h: int, input_w: int, seed: int = 0,
                   distribution: Literal["uniform", "zeros", "ramp"] = "uniform",
                   batch: int = 1) -> PyramidFeatures:
    """Deterministic stand-in for encoder outputs."""
    if input_h % 32 or input_w % 32 or input_h < 32 or input_w < 32:
        raise ConfigError(f"input {input_h}x{input_w} must be a positive multiple of 32")
    rng = make_rng(seed)
    out = []
    for i, c in enumerate(cfg.channels):
        s = 4 * 2 ** i
        shape = (batch, c, input_h // s, input_w // s)
        if distribution == "zeros":
            x = np.zeros(shape, T.DTYPE)
        elif distribution == "uniform":
            x = rng.uniform(-1.0, 1.0, size=shape).astype(T.DTYPE)
        elif distribution == "ramp":
            x = np.linspace(-1.0, 1.0, int(np.prod(shape)), dtype=np.float64).reshape(shape)
            x = x.astype(T.DTYPE)
        else:
            raise ConfigError(f"unknown distribution {distribution!r}")
        out.append(x)
    return PyramidFeatures(*out)


def stage_shapes(cfg: DecoderConfig, input_h: int, input_w: int, batch: int = 1):
    """Closed-form (n, classes, h, w) of p1..p4."""
    return [(batch, cfg.num_classes, input_h // 2 ** (5 - i), input_w // 2 ** (5 - i))
            for i in range(4)]
