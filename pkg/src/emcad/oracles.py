"""Slow scalar reference implementations.

Everything here is written with explicit Python loops over flat lists so it
shares no code path with the vectorized kernels in :mod:`emcad.tensor`.
"""

from __future__ import annotations

import math

import numpy as np


def _get(a, idx):
    return float(a[idx])


def conv2d_direct(x, weight, bias=None, stride=1, padding=0, groups=1):
    n, c, h, w = x.shape
    oc, icg, kh, kw = weight.shape
    ocg = oc // groups
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(oc):
            grp = o // ocg
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0 if bias is None else float(bias[o])
                    for i in range(icg):
                        ci = grp * icg + i
                        for ky in range(kh):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - padding
                                if ix < 0 or ix >= w:
                                    continue
                                acc += _get(x, (b, ci, iy, ix)) * _get(weight, (o, i, ky, kx))
                    out[b, o, oy, ox] = acc
    return out


def spatial_pool_scan(x, mode):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            vals = [_get(x, (b, ch, y, xx)) for y in range(h) for xx in range(w)]
            out[b, ch, 0, 0] = max(vals) if mode == "max" else math.fsum(vals) / len(vals)
    return out


def channel_pool_scan(x, mode):
    n, c, h, w = x.shape
    out = np.zeros((n, 1, h, w), dtype=np.float64)
    for b in range(n):
        for y in range(h):
            for xx in range(w):
                vals = [_get(x, (b, ch, y, xx)) for ch in range(c)]
                out[b, 0, y, xx] = max(vals) if mode == "max" else math.fsum(vals) / len(vals)
    return out


def nearest2x_scan(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for y in range(2 * h):
                for xx in range(2 * w):
                    out[b, ch, y, xx] = _get(x, (b, ch, y // 2, xx // 2))
    return out


def bilinear_scan(x, out_h, out_w):
    """Per-pixel half-pixel-centre bilinear interpolation."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)

    def src_coord(d, size, osize):
        s = (d + 0.5) * size / osize - 0.5
        s = max(s, 0.0)
        i0 = min(int(math.floor(s)), size - 1)
        i1 = min(i0 + 1, size - 1)
        return i0, i1, s - i0

    for b in range(n):
        for ch in range(c):
            for y in range(out_h):
                y0, y1, fy = src_coord(y, h, out_h)
                for xx in range(out_w):
                    x0, x1, fx = src_coord(xx, w, out_w)
                    top = _get(x, (b, ch, y0, x0)) * (1 - fx) + _get(x, (b, ch, y0, x1)) * fx
                    bot = _get(x, (b, ch, y1, x0)) * (1 - fx) + _get(x, (b, ch, y1, x1)) * fx
                    out[b, ch, y, xx] = top * (1 - fy) + bot * fy
    return out


def shuffle_permutation(c, groups):
    """Source channel for each output channel of a channel shuffle."""
    per = c // groups
    # output position j*groups + g  <-  input channel g*per + j
    perm = [0] * c
    for g in range(groups):
        for j in range(per):
            perm[j * groups + g] = g * per + j
    return perm


def channel_shuffle_scan(x, groups):
    perm = shuffle_permutation(x.shape[1], groups)
    out = np.zeros(x.shape, dtype=np.float64)
    for o, src in enumerate(perm):
        out[:, o] = x[:, src]
    return out


def pairwise_hd95(a_pts, b_pts, q=95.0):
    """Pooled percentile of directed nearest distances, exhaustive O(|A||B|)."""
    def directed(src, dst):
        res = []
        for p in src:
            res.append(min(math.dist(p, r) for r in dst))
        return res

    d = directed(a_pts, b_pts) + directed(b_pts, a_pts)
    return float(np.percentile(d, q))
