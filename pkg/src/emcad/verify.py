"""Randomized property suites, runnable from the command line.

Every suite is a generator of :class:`Check` results. Kernels are looked up
through their modules at call time so a patched kernel is what gets checked.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import blocks as B
from . import cost as C
from . import decoder as D
from . import losses as L
from . import oracles as O
from . import tensor as T
from .tensor import ConvParams, NormParams

TOL = 1e-5


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _rng(seed):
    return np.random.default_rng(seed)


def _maxdiff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def random_conv_case(rng):
    """A random small conv instance covering plain, grouped and depth-wise layouts."""
    n = int(rng.integers(1, 4))
    g = int(rng.choice([1, 2, 3, 4]))
    icg = int(rng.integers(1, 3)) if g > 1 else int(rng.integers(1, 5))
    ocg = int(rng.integers(1, 3)) if g > 1 else int(rng.integers(1, 5))
    c, oc = g * icg, g * ocg
    k = int(rng.choice([1, 3, 5]))
    pad = int(rng.integers(0, k // 2 + 1))
    stride = int(rng.choice([1, 1, 2]))
    h = int(rng.integers(max(1, k - 2 * pad), 10))
    w = int(rng.integers(max(1, k - 2 * pad), 10))
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((oc, icg, k, k)).astype(np.float32)
    bias = rng.standard_normal(oc).astype(np.float32) if rng.random() < 0.5 else None
    return x, ConvParams(wt, bias, stride=stride, padding=pad, groups=g)


def kernels_suite(instances: int = 200, seed: int = 0) -> Iterator[Check]:
    rng = _rng(seed)
    worst = 0.0
    for i in range(instances):
        x, p = random_conv_case(rng)
        ref = O.conv2d_direct(x, p.weight, p.bias, p.stride, p.padding, p.groups)
        got = T.conv2d(x, p)
        if got.shape != ref.shape:
            yield Check("kernels", "conv2d", False, f"instance {i}: shape {got.shape} vs {ref.shape}")
            return
        d = _maxdiff(got, ref)
        worst = max(worst, d)
        if d >= TOL:
            yield Check("kernels", "conv2d", False,
                        f"instance {i}: x{x.shape} k={p.kernel_size} g={p.groups} "
                        f"s={p.stride} pad={p.padding}: max diff {d:.3g}")
            return
    yield Check("kernels", "conv2d", True, f"{instances} instances, max diff {worst:.2e}")

    for i in range(instances):
        shape = tuple(int(v) for v in rng.integers(1, 8, size=4))
        x = rng.standard_normal(shape).astype(np.float32)
        cases = [
            ("adaptive_pool_max", T.adaptive_pool_1x1(x, "max"), O.spatial_pool_scan(x, "max")),
            ("adaptive_pool_avg", T.adaptive_pool_1x1(x, "avg"), O.spatial_pool_scan(x, "avg")),
            ("channel_pool_max", T.channel_pool(x, "max"), O.channel_pool_scan(x, "max")),
            ("channel_pool_avg", T.channel_pool(x, "avg"), O.channel_pool_scan(x, "avg")),
            ("upsample_nearest", T.upsample2x(x, "nearest"), O.nearest2x_scan(x)),
            ("upsample_bilinear", T.upsample2x(x, "bilinear"),
             O.bilinear_scan(x, 2 * shape[2], 2 * shape[3])),
        ]
        divisors = [g for g in range(1, shape[1] + 1) if shape[1] % g == 0]
        g = int(rng.choice(divisors))
        cases.append(("channel_shuffle", T.channel_shuffle(x, g), O.channel_shuffle_scan(x, g)))
        for name, got, ref in cases:
            if got.shape != ref.shape or _maxdiff(got, ref) >= TOL:
                yield Check("kernels", name, False, f"instance {i}: shape {shape}")
                return
    yield Check("kernels", "pool/upsample/shuffle", True, f"{instances} instances")


def _rand_norm(rng, c):
    return NormParams(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c),
                      rng.normal(0, 0.2, c), rng.uniform(0.5, 1.5, c))


def random_gate(rng, c, lgag=True):
    f = max(1, c // 2)
    draw = lambda s: rng.normal(0, 0.2, s).astype(np.float32)  # noqa: E731
    groups = f if (lgag and c % f == 0) else 1
    p = B.make_gate(draw, c, c, f, groups=groups, baseline=not lgag)
    cls = type(p)
    return cls(p.gc_g, _rand_norm(rng, f), p.gc_x, _rand_norm(rng, f), p.psi, _rand_norm(rng, 1))


def random_mscb(rng, c, ks=(1, 3, 5), arrangement="parallel", cout=None):
    draw = lambda s: rng.normal(0, 0.3, s).astype(np.float32)  # noqa: E731
    p = B.make_mscb(draw, c, cout or c, ks, 2, arrangement)
    e = p.expanded
    dw = tuple(B.DWCB(d.conv, _rand_norm(rng, e)) for d in p.dwcbs)
    return B.MSCBParams(p.pwc1, _rand_norm(rng, e), dw, p.pwc2, _rand_norm(rng, p.pwc2.out_channels),
                        p.shuffle_groups, p.arrangement)


def blocks_suite(instances: int = 100, seed: int = 1) -> Iterator[Check]:
    # moderate scales keep float32 sigmoid away from saturation at 0 or 1
    rng = _rng(seed)
    draw = lambda s: rng.normal(0, 0.2, s).astype(np.float32)  # noqa: E731
    for i in range(instances):
        c = int(rng.choice([2, 4, 6, 8]))
        h, w = (int(v) for v in rng.integers(2, 8, size=2))
        x = rng.standard_normal((2, c, h, w)).astype(np.float32)
        g = rng.standard_normal((2, c, h, w)).astype(np.float32)
        lg, ag = random_gate(rng, c, True), random_gate(rng, c, False)
        cab, sab = B.make_cab(draw, c, 4), B.make_sab(draw, 3)
        outs = {
            "lgag": (B.lgag_forward(lg, g, x), B.gate_attention(lg, g, x)),
            "ag": (B.ag_forward(ag, g, x), B.gate_attention(ag, g, x)),
            "cab": (B.cab_forward(cab, x), B.cab_attention(cab, x)),
            "sab": (B.sab_forward(sab, x), B.sab_attention(sab, x)),
        }
        for name, (out, att) in outs.items():
            if np.any(np.abs(out) > np.abs(x)):
                yield Check("blocks", "gating bound", False, f"{name}, instance {i}")
                return
            if not (np.all(att > 0) and np.all(att < 1)):
                yield Check("blocks", "attention range", False, f"{name}, instance {i}")
                return
        mscb = random_mscb(rng, c)
        composed = B.mscb_forward(mscb, B.sab_forward(sab, B.cab_forward(cab, x)))
        d = _maxdiff(B.mscam_forward(cab, sab, mscb, x), composed)
        if d >= TOL:
            yield Check("blocks", "mscam composition", False, f"instance {i}: diff {d:.3g}")
            return
        groups = [gg for gg in range(1, c + 1) if c % gg == 0]
        gg = int(rng.choice(groups))
        if not np.array_equal(T.channel_shuffle(T.channel_shuffle(x, gg), c // gg), x):
            yield Check("blocks", "shuffle inverse", False, f"c={c} groups={gg}")
            return
    yield Check("blocks", "gating bound / attention range / mscam / shuffle", True,
                f"{instances} instances")

    c = 4
    x = rng.standard_normal((1, c, 6, 6)).astype(np.float32)
    base = random_mscb(rng, c, (1, 3))
    swapped = dataclasses.replace(base, dwcbs=base.dwcbs[::-1])
    h = T.relu6(x.repeat(2, axis=1))
    par = _maxdiff(B.msdc_forward(base, h), B.msdc_forward(swapped, h))
    seq_a = B.msdc_forward(dataclasses.replace(base, arrangement="sequential"), h)
    seq_b = B.msdc_forward(dataclasses.replace(swapped, arrangement="sequential"), h)
    seq = _maxdiff(seq_a, seq_b)
    yield Check("blocks", "parallel MSDC order invariance", par < TOL, f"diff {par:.2e}")
    yield Check("blocks", "sequential MSDC order sensitivity", seq > 1e-3, f"diff {seq:.2e}")


def graph_suite(seed: int = 2) -> Iterator[Check]:
    cfg = D.DecoderConfig(channels=(8, 16, 24, 32))
    a, b = D.build_decoder(cfg, seed), D.build_decoder(cfg, seed)
    same = all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()))
    yield Check("graph", "build determinism", same)
    f = D.synth_features(cfg, 64, 96, seed)
    m1, m2 = D.decoder_forward(a, f), D.decoder_forward(b, f)
    yield Check("graph", "forward determinism", all(np.array_equal(x, y) for x, y in zip(m1, m2)))
    shapes = [p.shape for p in m1]
    yield Check("graph", "stage shapes", shapes == D.stage_shapes(cfg, 64, 96), str(shapes))
    zero = D.synth_features(cfg, 64, 64, distribution="zeros")
    heads_zeroed = a.with_arrays({k: np.zeros_like(v) for k, v in a.named_parameters()
                                  if k.endswith("head.weight")})
    ok = True
    for stage, p in zip(heads_zeroed.stages, D.decoder_forward(heads_zeroed, zero)):
        ok &= np.allclose(p, stage.head.bias[None, :, None, None], atol=TOL)
    yield Check("graph", "zero features give head bias", bool(ok))


def cost_suite() -> Iterator[Check]:
    from .io import flat_parameter_vector
    for cfg in (D.standard_config(), D.tiny_config(), D.standard_config(use_mscam=False)):
        dec = D.build_decoder(cfg)
        n = C.count_params(dec).params
        yield Check("cost", f"params == weight vector {cfg.channels}", n == flat_parameter_vector(dec).size,
                    f"{n}")
        f1, f2, f4 = (C.count_flops(dec, 64 * s).flops for s in (1, 2, 4))
        # affine in pixel count: pooled channel attention costs the same at any size
        yield Check("cost", f"affine pixel scaling {cfg.channels}", f4 - f2 == 4 * (f2 - f1))
    full = C.config_cost(D.standard_config(), 224)
    sub = sum(n.params for _, n in full.walk() if n.name == "mscam")
    off = C.config_cost(D.standard_config(use_mscam=False), 224)
    yield Check("cost", "mscam additivity", full.params - off.params == sub)
    best = C.calibrate_gate()
    cfg = D.DecoderConfig()
    yield Check("cost", "gate defaults are calibrated",
                (best["divisor"], best["group_width"], best["bias"])
                == (cfg.lgag_intermediate_divisor, cfg.lgag_group_width, cfg.lgag_bias), str(best))


def loss_suite(instances: int = 20, seed: int = 3) -> Iterator[Check]:
    rng = _rng(seed)
    for i in range(instances):
        h = w = int(rng.integers(4, 12))
        tgt = (rng.random((2, 1, h, w)) > 0.5).astype(np.float32)
        maps = [rng.standard_normal((2, 1, h, w)).astype(np.float32) for _ in range(4)]
        terms = []
        for mask in range(1, 16):
            members = [maps[j] for j in range(4) if mask >> j & 1]
            acc = np.zeros_like(members[0], dtype=np.float64)
            for mm in members:
                acc += mm
            terms.append(L.bce_iou_weighted(acc.astype(np.float32), tgt))
        if L.mutation_loss(maps, tgt) != math.fsum(terms):
            yield Check("loss", "mutation enumeration", False, f"instance {i}")
            return
        a = rng.random((h, w)) > 0.5
        b = rng.random((h, w)) > 0.5
        dsc, iou = L.dice_score(a, b), L.iou_score(a, b)
        if abs(dsc / 100 - 2 * (iou / 100) / (1 + iou / 100)) > 1e-9:
            yield Check("loss", "dice/iou identity", False, f"instance {i}")
            return
        if a.any() and L.hd95(a, a) != 0.0:
            yield Check("loss", "hd95 identity", False, f"instance {i}")
            return
    yield Check("loss", "mutation / dice-iou / hd95", True, f"{instances} instances")
    ones = np.ones((1, 1, 8, 8), np.float32)
    perfect = L.bce_iou_weighted(ones * 50, ones)
    yield Check("loss", "perfect bce_iou", perfect < 1e-4, f"{perfect:.2e}")
    lab = rng.integers(0, 3, size=(1, 8, 8))
    logits = (np.eye(3)[lab].transpose(0, 3, 1, 2) * 100 - 50).astype(np.float32)
    perfect = L.ce_dice_loss(logits, lab)
    yield Check("loss", "perfect ce_dice", perfect < 1e-4, f"{perfect:.2e}")


SUITES: dict[str, Callable[[], Iterator[Check]]] = {
    "kernels": kernels_suite,
    "blocks": blocks_suite,
    "graph": graph_suite,
    "cost": cost_suite,
    "loss": loss_suite,
}


def run(suite: str = "all") -> Iterator[Check]:
    """Run one suite (or all); stops at the first failed check."""
    names = list(SUITES) if suite == "all" else [suite]
    for name in names:
        if name not in SUITES:
            raise KeyError(name)
    for name in names:
        for check in SUITES[name]():
            yield check
            if not check.passed:
                return
