"""Static parameter and FLOP accounting for a built decoder.

Two FLOP conventions are supported:

``mac``
    Convolution multiply-accumulates only (1 MAC = 1 FLOP). Everything
    else is free.
``full``
    Layer-level counting: convolutions add one FLOP per output element
    for the bias, batch norm costs two per element, ReLU/ReLU6 one per
    element, adaptive pooling one per input element and upsampling one per
    output element. Functional merges (additions, attention products,
    sigmoid, channel pooling, shuffle) stay free.

Both conventions are affine in the number of pixels: channel attention acts
on pooled 1x1 maps and costs the same at every resolution, everything else
scales with the pixel count.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

from . import blocks as B
from .decoder import Decoder, DecoderConfig, build_decoder
from .tensor import ConfigError, ConvParams

Mode = Literal["mac", "full"]

GATE_PARAM_TARGET = 11_010


@dataclass
class CostReport:
    """Node of the cost tree. Leaves carry counts; parents sum their children."""

    name: str
    own_params: int = 0
    own_flops: int = 0
    children: list["CostReport"] = field(default_factory=list)

    @property
    def params(self) -> int:
        return self.own_params + sum(c.params for c in self.children)

    @property
    def flops(self) -> int:
        return self.own_flops + sum(c.flops for c in self.children)

    def add(self, child: "CostReport") -> "CostReport":
        self.children.append(child)
        return child

    def walk(self, prefix: str = "") -> Iterator[tuple[str, "CostReport"]]:
        path = f"{prefix}/{self.name}" if prefix else self.name
        yield path, self
        for c in self.children:
            yield from c.walk(path)

    def find(self, path: str) -> "CostReport":
        for p, node in self.walk():
            if p == path:
                return node
        raise KeyError(path)

    def sum_named(self, name: str) -> tuple[int, int]:
        """Total (params, flops) over every node called ``name``."""
        nodes = [n for _, n in self.walk() if n.name == name]
        return sum(n.params for n in nodes), sum(n.flops for n in nodes)

    def is_empty(self) -> bool:
        return not self.children and self.own_params == 0 and self.own_flops == 0


class _Counter:
    def __init__(self, mode: Mode, with_flops: bool = True):
        if mode not in ("mac", "full"):
            raise ConfigError(f"unknown FLOP mode {mode!r}")
        self.full = mode == "full"
        self.with_flops = with_flops

    def _f(self, n: int) -> int:
        return n if self.with_flops else 0

    def conv(self, name: str, p: ConvParams, h: int, w: int, uses: int = 1) -> CostReport:
        oh, ow = p.output_hw(h, w)
        oc, icg, kh, kw = p.weight.shape
        flops = oh * ow * oc * icg * kh * kw
        if self.full and p.bias is not None:
            flops += oh * ow * oc
        return CostReport(name, p.num_params, self._f(uses * flops))

    def bn(self, name: str, c: int, h: int, w: int) -> CostReport:
        return CostReport(name, 2 * c, self._f(2 * c * h * w if self.full else 0))

    def elementwise(self, name: str, numel: int) -> CostReport:
        return CostReport(name, 0, self._f(numel if self.full else 0))


def _gate_node(k: _Counter, gate: B.LGAGParams, h: int, w: int) -> CostReport:
    f = gate.intermediate
    node = CostReport("gate")
    node.add(k.conv("gc_g", gate.gc_g, h, w))
    node.add(k.bn("bn_g", f, h, w))
    node.add(k.conv("gc_x", gate.gc_x, h, w))
    node.add(k.bn("bn_x", f, h, w))
    node.add(k.elementwise("relu", f * h * w))
    node.add(k.conv("psi", gate.psi, h, w))
    node.add(k.bn("bn_psi", 1, h, w))
    return node


def _eucb_node(k: _Counter, e: B.EUCBParams, h: int, w: int) -> CostReport:
    c = e.dwc.in_channels
    H, W = 2 * h, 2 * w
    node = CostReport("eucb")
    node.add(k.elementwise("upsample", c * H * W))
    node.add(k.conv("dwc", e.dwc, H, W))
    node.add(k.bn("bn", c, H, W))
    node.add(k.elementwise("relu", c * H * W))
    node.add(k.conv("proj", e.proj, H, W))
    return node


def _mscam_node(k: _Counter, m: B.MSCAMParams, c: int, h: int, w: int) -> CostReport:
    node = CostReport("mscam")
    cab = node.add(CostReport("cab"))
    cab.add(k.elementwise("max_pool", c * h * w))
    cab.add(k.elementwise("avg_pool", c * h * w))
    # one weight set serves both pooled branches
    cab.add(k.conv("reduce", m.cab.reduce, 1, 1, uses=2))
    cab.add(k.elementwise("relu", 2 * m.cab.reduce.out_channels))
    cab.add(k.conv("expand", m.cab.expand, 1, 1, uses=2))
    sab = node.add(CostReport("sab"))
    sab.add(k.conv("lkc", m.sab.lkc, h, w))

    p = m.mscb
    e = p.expanded
    mscb = node.add(CostReport("mscb"))
    mscb.add(k.conv("pwc1", p.pwc1, h, w))
    mscb.add(k.bn("bn1", e, h, w))
    mscb.add(k.elementwise("relu6", e * h * w))
    for d in p.dwcbs:
        ks = d.conv.kernel_size[0]
        br = mscb.add(CostReport(f"dwcb{ks}"))
        br.add(k.conv("conv", d.conv, h, w))
        br.add(k.bn("bn", e, h, w))
        br.add(k.elementwise("relu6", e * h * w))
    mscb.add(k.conv("pwc2", p.pwc2, h, w))
    mscb.add(k.bn("bn2", p.pwc2.out_channels, h, w))
    return node


def _dedupe_dwcb_names(node: CostReport) -> None:
    seen: dict[str, int] = {}
    for c in node.children:
        if c.name in seen:
            seen[c.name] += 1
            c.name = f"{c.name}_{seen[c.name]}"
        else:
            seen[c.name] = 0


def analyze(dec: Decoder, input_h: Optional[int] = None, input_w: Optional[int] = None,
            mode: Mode = "mac") -> CostReport:
    """Cost tree of ``dec``. Without an input size only parameters are counted."""
    with_flops = input_h is not None
    if with_flops:
        if input_w is None:
            input_w = input_h
        if input_h % 32 or input_w % 32 or input_h < 32 or input_w < 32:
            raise ConfigError(f"input {input_h}x{input_w} must be a positive multiple of 32")
    else:
        input_h = input_w = 32
    k = _Counter(mode, with_flops)
    root = CostReport("decoder")
    for s in dec.stages:
        h, w = input_h // (4 * 2 ** s.level), input_w // (4 * 2 ** s.level)
        node = root.add(CostReport(f"stage{s.level + 1}"))
        if s.eucb is not None:
            node.add(_eucb_node(k, s.eucb, h // 2, w // 2))
        if s.gate is not None:
            node.add(_gate_node(k, s.gate, h, w))
        if s.mscam is not None:
            m = node.add(_mscam_node(k, s.mscam, s.channels, h, w))
            _dedupe_dwcb_names(m.children[-1])
        node.add(k.conv("head", s.head, h, w))
    return root


def count_params(dec: Decoder) -> CostReport:
    return analyze(dec)


def count_flops(dec: Decoder, input_h: int, input_w: Optional[int] = None,
                mode: Mode = "mac") -> CostReport:
    return analyze(dec, input_h, input_w, mode)


def config_cost(cfg: DecoderConfig, input_h: int, input_w: Optional[int] = None,
                mode: Mode = "mac") -> CostReport:
    return analyze(build_decoder(cfg, seed=0), input_h, input_w, mode)


def compare_gate_costs(cfg: DecoderConfig, input_h: int = 256, input_w: Optional[int] = None,
                       mode: Mode = "full") -> tuple[CostReport, CostReport]:
    """Total cost of the decoder's three grouped gates vs. three baseline gates.

    Defaults to the ``full`` convention, which is how per-module gate costs
    are usually tabulated.
    """
    if any(c < 1 for c in cfg.channels):
        raise ConfigError("degenerate channel widths")
    out = []
    for kind in ("lgag", "ag"):
        c = cfg.replace(gate=kind, use_lgag=True, cascaded=True)
        tree = config_cost(c, input_h, input_w, mode)
        node = CostReport(kind)
        for stage in tree.children:
            for child in stage.children:
                if child.name == "gate":
                    node.add(CostReport(stage.name, children=[child]))
        out.append(node)
    return out[0], out[1]


def _gate_params(c: int, divisor: int, group_width: int, bias: bool, kernel: int = 3) -> Optional[int]:
    f_int = c // divisor
    if f_int < 1 or c % divisor or c % group_width or f_int % (c // group_width):
        return None
    groups = c // group_width
    g = B.make_gate(np.zeros, c, c, f_int, kernel=kernel, groups=groups, bias=bias)
    return sum(cv.num_params for cv in (g.gc_g, g.gc_x, g.psi)) + 2 * (2 * f_int + 1)


def calibrate_gate(channels: Sequence[int] = (64, 128, 320, 512),
                   target: int = GATE_PARAM_TARGET,
                   divisors: Sequence[int] = (4, 2, 1),
                   biases: Sequence[bool] = (False, True)) -> dict:
    """Exhaustive search for the gate geometry closest to a parameter budget.

    The three gates sit at every width but the deepest. Returns the best
    ``{"divisor", "group_width", "bias", "params"}``.
    """
    widths = list(channels)[:-1]
    group_widths = sorted({d for c in widths for d in range(1, c + 1) if c % d == 0})
    best = None
    for divisor, gw, bias in itertools.product(divisors, group_widths, biases):
        counts = [_gate_params(c, divisor, gw, bias) for c in widths]
        if None in counts:
            continue
        total = sum(counts)
        key = (abs(total - target), divisor, gw, bias)
        if best is None or key < best[0]:
            best = (key, {"divisor": divisor, "group_width": gw, "bias": bias, "params": total})
    if best is None:
        raise ConfigError("no admissible gate geometry")
    return best[1]


def human(n: float, unit: str) -> str:
    scale = {"K": 1e3, "M": 1e6, "G": 1e9}[unit]
    return f"{n / scale:.3f}{unit}"


def summary_line(report: CostReport, input_h: Optional[int] = None, input_w: Optional[int] = None,
                 mode: Mode = "mac") -> str:
    line = f"{report.name}: {report.params / 1e6:.3f}M params"
    if input_h is not None:
        line += f" / {report.flops / 1e9:.3f}G FLOPs @{input_h}x{input_w or input_h} ({mode})"
    return line


COLUMNS = ("block", "params", "flops")


def render_table(report: CostReport, fmt: Literal["text", "csv"] = "text") -> str:
    rows = [] if report.is_empty() else [(p, n.params, n.flops) for p, n in report.walk()]
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(COLUMNS)
        wr.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ConfigError(f"unknown table format {fmt!r}")
    width = max([len(COLUMNS[0])] + [len(r[0]) for r in rows])
    lines = [f"{COLUMNS[0]:<{width}}  {COLUMNS[1]:>12}  {COLUMNS[2]:>14}"]
    lines += [f"{p:<{width}}  {n:>12,d}  {f:>14,d}" for p, n, f in rows]
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[tuple[str, int, int]]:
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    if tuple(header) != COLUMNS:
        raise ValueError(f"unexpected header {header}")
    return [(r[0], int(r[1]), int(r[2])) for r in rd]
