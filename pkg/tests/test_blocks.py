import dataclasses

import numpy as np
import pytest

from emcad import blocks as B
from emcad import oracles as O
from emcad import tensor as T
from emcad.tensor import ConfigError, ConvParams, NormParams, ShapeError

from conftest import randn


# Reference pipeline built on the loop oracles and plain numpy, independent of the fast kernels.

def conv(x, p):
    return O.conv2d_direct(x, p.weight, p.bias, p.stride, p.padding, p.groups)


def bn(x, p):
    s = lambda v: np.asarray(v, np.float64)[None, :, None, None]  # noqa: E731
    return (x - s(p.running_mean)) / np.sqrt(s(p.running_var) + p.eps) * s(p.gamma) + s(p.beta)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def relu6(x):
    return np.clip(x, 0, 6)


def random_norm(rng, c):
    return NormParams(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c),
                      rng.uniform(0.5, 1.5, c))


def drawer(rng, scale=0.3):
    return lambda shape: (rng.standard_normal(shape) * scale).astype(np.float32)


def with_psi_bias(p, value):
    psi = ConvParams(np.zeros_like(p.psi.weight), np.full(1, value))
    return dataclasses.replace(p, psi=psi)


@pytest.fixture
def lgag(rng):
    p = B.make_gate(drawer(rng), 8, 8, 4, groups=4)
    return dataclasses.replace(p, bn_g=random_norm(rng, 4), bn_x=random_norm(rng, 4), bn_psi=random_norm(rng, 1))


class TestGates:
    def test_lgag_matches_manual_composition(self, rng, lgag):
        g, x = randn(rng, 2, 8, 6, 5), randn(rng, 2, 8, 6, 5)
        q = np.maximum(bn(conv(g, lgag.gc_g), lgag.bn_g) + bn(conv(x, lgag.gc_x), lgag.bn_x), 0)
        ref = x * sig(bn(conv(q, lgag.psi), lgag.bn_psi))
        np.testing.assert_allclose(B.lgag_forward(lgag, g, x), ref, atol=1e-5)

    def test_lgag_geometry(self, lgag):
        assert lgag.gc_g.kernel_size == (3, 3) and lgag.group_count == 4 and lgag.intermediate == 4

    @pytest.mark.parametrize("bias,expected", [(-50.0, "zero"), (50.0, "x")])
    def test_saturated_gate(self, rng, lgag, bias, expected):
        p = with_psi_bias(dataclasses.replace(lgag, bn_psi=NormParams.identity(1)), bias)
        g, x = randn(rng, 1, 8, 4, 4), randn(rng, 1, 8, 4, 4)
        out = B.lgag_forward(p, g, x)
        np.testing.assert_allclose(out, np.zeros_like(x) if expected == "zero" else x, atol=1e-6)

    @pytest.mark.parametrize("bias,expected", [(-50.0, "zero"), (50.0, "x")])
    def test_ag_saturated(self, rng, bias, expected):
        p = with_psi_bias(B.make_gate(drawer(rng), 6, 6, 3, baseline=True), bias)
        g, x = randn(rng, 1, 6, 3, 3), randn(rng, 1, 6, 3, 3)
        np.testing.assert_allclose(B.ag_forward(p, g, x), np.zeros_like(x) if expected == "zero" else x,
                                   atol=1e-6)

    def test_ag_matches_manual_composition(self, rng):
        p = B.make_gate(drawer(rng), 6, 6, 3, baseline=True)
        assert p.gc_g.kernel_size == (1, 1) and p.gc_g.groups == 1
        g, x = randn(rng, 1, 6, 5, 5), randn(rng, 1, 6, 5, 5)
        q = np.maximum(bn(conv(g, p.gc_g), p.bn_g) + bn(conv(x, p.gc_x), p.bn_x), 0)
        ref = x * sig(bn(conv(q, p.psi), p.bn_psi))
        np.testing.assert_allclose(B.ag_forward(p, g, x), ref, atol=1e-5)

    def test_spatial_mismatch(self, rng, lgag):
        with pytest.raises(ShapeError):
            B.lgag_forward(lgag, randn(rng, 1, 8, 4, 4), randn(rng, 1, 8, 4, 5))

    def test_channel_mismatch(self, rng, lgag):
        with pytest.raises(ShapeError):
            B.lgag_forward(lgag, randn(rng, 1, 4, 4, 4), randn(rng, 1, 8, 4, 4))

    def test_ag_forward_needs_baseline_params(self, rng, lgag):
        with pytest.raises(ConfigError):
            B.ag_forward(lgag, randn(rng, 1, 8, 2, 2), randn(rng, 1, 8, 2, 2))


class TestCAB:
    def test_zero_weights_halve(self, rng):
        p = B.make_cab(lambda s: np.zeros(s, np.float32), 8, 4)
        x = randn(rng, 1, 8, 3, 3)
        np.testing.assert_allclose(B.cab_forward(p, x), x / 2, atol=1e-7)

    def test_constant_input_branches_coincide(self, rng):
        p = B.make_cab(drawer(rng), 8, 4)
        x = np.full((1, 8, 3, 3), 0.7, np.float32)
        pooled = np.full((1, 8, 1, 1), 0.7)
        branch = conv(np.maximum(conv(pooled, p.reduce), 0), p.expand)
        np.testing.assert_allclose(B.cab_attention(p, x), sig(2 * branch), atol=1e-6)

    def test_matches_manual_composition(self, rng):
        p = B.make_cab(drawer(rng), 8, 2)
        x = randn(rng, 2, 8, 4, 5)
        mx = x.max(axis=(2, 3), keepdims=True)
        av = x.astype(np.float64).mean(axis=(2, 3), keepdims=True)
        branch = lambda v: conv(np.maximum(conv(v, p.reduce), 0), p.expand)  # noqa: E731
        np.testing.assert_allclose(B.cab_forward(p, x), x * sig(branch(mx) + branch(av)), atol=1e-5)

    def test_reduced_width(self):
        assert B.reduced_channels(64, 16) == 4
        assert B.reduced_channels(8, 16) == 1

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            B.cab_forward(B.make_cab(drawer(rng), 8), randn(rng, 1, 4, 2, 2))


class TestSAB:
    def test_zero_weights_halve(self, rng):
        p = B.make_sab(lambda s: np.zeros(s, np.float32))
        x = randn(rng, 1, 5, 4, 4)
        np.testing.assert_allclose(B.sab_forward(p, x), x / 2, atol=1e-7)

    def test_matches_manual_composition(self, rng):
        p = B.make_sab(drawer(rng))
        x = randn(rng, 2, 5, 9, 8)
        pooled = np.concatenate([x.max(axis=1, keepdims=True),
                                 x.astype(np.float64).mean(axis=1, keepdims=True)], axis=1)
        np.testing.assert_allclose(B.sab_forward(p, x), x * sig(conv(pooled, p.lkc)), atol=1e-5)

    def test_kernel_must_be_odd(self, rng):
        with pytest.raises(ConfigError):
            B.make_sab(drawer(rng), kernel=4)


def random_mscb(rng, cin, cout, ks, arrangement="parallel"):
    p = B.make_mscb(drawer(rng), cin, cout, ks, 2, arrangement)
    e = p.expanded
    dw = tuple(B.DWCB(d.conv, random_norm(rng, e)) for d in p.dwcbs)
    return dataclasses.replace(p, bn1=random_norm(rng, e), dwcbs=dw, bn2=random_norm(rng, cout))


def dwcb_ref(d, x):
    return relu6(bn(conv(x, d.conv), d.bn))


class TestMSDC:
    def test_identity_single_branch(self, rng):
        e = 4
        ident = ConvParams(np.ones((e, 1, 1, 1)), groups=e)
        p = B.make_mscb(drawer(rng), 2, 2, (1,))
        p = dataclasses.replace(p, dwcbs=(B.DWCB(ident, NormParams.identity(e)),))
        x = randn(rng, 1, e, 3, 3, scale=4)
        np.testing.assert_allclose(B.msdc_forward(p, x), np.clip(x, 0, 6), rtol=1e-5, atol=1e-6)

    def test_parallel_sums_branches(self, rng):
        p = random_mscb(rng, 3, 3, (1, 3, 5))
        x = randn(rng, 1, 6, 6, 6)
        ref = sum(dwcb_ref(d, x) for d in p.dwcbs)
        np.testing.assert_allclose(B.msdc_forward(p, x), ref, atol=1e-5)

    def test_sequential_two_steps(self, rng):
        p = random_mscb(rng, 3, 3, (1, 3), "sequential")
        x = randn(rng, 1, 6, 5, 5)
        x1 = x + dwcb_ref(p.dwcbs[0], x)
        x2 = x1 + dwcb_ref(p.dwcbs[1], x1)
        np.testing.assert_allclose(B.msdc_forward(p, x), x2, atol=1e-5)

    def test_parallel_order_invariant_sequential_not(self, rng):
        p = random_mscb(rng, 2, 2, (1, 3))
        rev = dataclasses.replace(p, dwcbs=p.dwcbs[::-1])
        x = randn(rng, 1, 4, 5, 5)
        np.testing.assert_allclose(B.msdc_forward(p, x), B.msdc_forward(rev, x), atol=1e-6)
        seq, seq_rev = (dataclasses.replace(q, arrangement="sequential") for q in (p, rev))
        assert np.max(np.abs(B.msdc_forward(seq, x) - B.msdc_forward(seq_rev, x))) > 1e-3


class TestMSCB:
    def test_matches_manual_composition(self, rng):
        p = random_mscb(rng, 4, 6, (1, 3, 5))
        x = randn(rng, 2, 4, 5, 6)
        h = relu6(bn(conv(x, p.pwc1), p.bn1))
        h = sum(dwcb_ref(d, h) for d in p.dwcbs)
        h = O.channel_shuffle_scan(h, p.shuffle_groups)
        ref = bn(conv(h, p.pwc2), p.bn2)
        np.testing.assert_allclose(B.mscb_forward(p, x), ref, atol=1e-5)

    def test_zero_input_closed_form(self, rng):
        p = random_mscb(rng, 4, 4, (1, 3))
        out = B.mscb_forward(p, np.zeros((1, 4, 5, 5), np.float32))
        # a zero tensor stays spatially constant through every stage except the zero padding at the border
        h = relu6(bn(np.zeros((1, p.expanded, 1, 1)), p.bn1))
        centre = sum(relu6(bn(h * d.conv.weight.sum(axis=(1, 2, 3))[None, :, None, None], d.bn))
                     for d in p.dwcbs)
        centre = O.channel_shuffle_scan(centre, p.shuffle_groups)
        ref = bn(conv(centre, p.pwc2), p.bn2)
        np.testing.assert_allclose(out[:, :, 2, 2], ref[:, :, 0, 0], atol=1e-5)

    def test_default_shuffle_groups(self):
        assert B.default_shuffle_groups(6, 3) == 3
        assert B.default_shuffle_groups(128, 3) == 1
        assert B.default_shuffle_groups(8, 2) == 2

    def test_no_residual(self, rng):
        p = B.make_mscb(lambda s: np.zeros(s, np.float32), 4, 4)
        x = randn(rng, 1, 4, 3, 3)
        np.testing.assert_array_equal(B.mscb_forward(p, x), np.zeros_like(x))

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ConfigError):
            B.make_mscb(drawer(rng), 2, 2, (2,))


class TestMSCAM:
    def test_composition(self, rng):
        cab, sab = B.make_cab(drawer(rng), 8, 4), B.make_sab(drawer(rng))
        mscb = random_mscb(rng, 8, 8, (1, 3, 5))
        x = randn(rng, 1, 8, 6, 6)
        ref = B.mscb_forward(mscb, B.sab_forward(sab, B.cab_forward(cab, x)))
        np.testing.assert_allclose(B.mscam_forward(cab, sab, mscb, x), ref, atol=1e-6)

    def test_near_identity_mscb(self, rng):
        # pwc1 duplicates channels, one 1x1 identity branch, pwc2 averages the pair back
        c = 4
        cab, sab = B.make_cab(drawer(rng), c, 2), B.make_sab(drawer(rng))
        pw1 = ConvParams(np.concatenate([np.eye(c), np.eye(c)])[:, :, None, None])
        pw2 = ConvParams((np.concatenate([np.eye(c), np.eye(c)], axis=1) / 2)[:, :, None, None])
        dw = B.DWCB(ConvParams(np.ones((2 * c, 1, 1, 1)), groups=2 * c), NormParams.identity(2 * c))
        ident = lambda n: NormParams.identity(n, eps=0.0)  # noqa: E731
        dw = B.DWCB(dw.conv, ident(2 * c))
        mscb = B.MSCBParams(pw1, ident(2 * c), (dw,), pw2, ident(c), 1)
        x = np.abs(randn(rng, 1, c, 5, 5))
        ref = relu6(B.sab_forward(sab, B.cab_forward(cab, x)).astype(np.float64))
        np.testing.assert_allclose(B.mscam_forward(cab, sab, mscb, x), ref, atol=1e-5)

    def test_shape(self, rng):
        cab, sab = B.make_cab(drawer(rng), 64), B.make_sab(drawer(rng))
        mscb = B.make_mscb(drawer(rng), 64, 64)
        assert B.mscam_forward(cab, sab, mscb, randn(rng, 1, 64, 16, 16)).shape == (1, 64, 16, 16)


class TestEUCB:
    def test_identity_configuration(self, rng):
        c = 3
        p = B.EUCBParams(ConvParams(np.pad(np.ones((c, 1, 1, 1)), ((0, 0), (0, 0), (1, 1), (1, 1))),
                                    padding=1, groups=c),
                         NormParams.identity(c, eps=0.0),
                         ConvParams(np.eye(c)[:, :, None, None], np.zeros(c)))
        x = randn(rng, 1, c, 3, 4)
        np.testing.assert_allclose(B.eucb_forward(p, x), np.maximum(T.upsample2x(x), 0), atol=1e-6)

    def test_matches_manual_composition(self, rng):
        p = B.make_eucb(drawer(rng), 4, 2)
        p = dataclasses.replace(p, bn=random_norm(rng, 4))
        x = randn(rng, 2, 4, 3, 5)
        up = O.nearest2x_scan(x)
        ref = conv(np.maximum(bn(conv(up, p.dwc), p.bn), 0), p.proj)
        out = B.eucb_forward(p, x)
        assert out.shape == (2, 2, 6, 10)
        np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_rejects_dense_conv(self, rng):
        with pytest.raises(ConfigError):
            B.EUCBParams(ConvParams(randn(rng, 2, 2, 3, 3), padding=1), NormParams.identity(2),
                         ConvParams(randn(rng, 2, 2, 1, 1)))


class TestSegHead:
    def test_bias_only(self, rng):
        p = ConvParams(np.zeros((2, 4, 1, 1)), np.array([0.5, -1.0]))
        y = B.seg_head_forward(p, randn(rng, 1, 4, 3, 3))
        np.testing.assert_array_equal(y[0, 0], 0.5)
        np.testing.assert_array_equal(y[0, 1], -1.0)

    def test_one_hot_selects_channel(self, rng):
        w = np.zeros((1, 4, 1, 1))
        w[0, 2] = 1
        x = randn(rng, 1, 4, 3, 3)
        np.testing.assert_array_equal(B.seg_head_forward(ConvParams(w, np.zeros(1)), x)[0, 0], x[0, 2])

    def test_per_pixel_dot_product(self, rng):
        p = ConvParams(randn(rng, 3, 4, 1, 1), randn(rng, 3))
        x = randn(rng, 2, 4, 3, 3)
        ref = np.einsum("oc,nchw->nohw", p.weight[:, :, 0, 0].astype(np.float64), x) + p.bias[None, :, None, None]
        np.testing.assert_allclose(B.seg_head_forward(p, x), ref, atol=1e-5)

    def test_rejects_spatial_kernel(self, rng):
        with pytest.raises(ConfigError):
            B.seg_head_forward(ConvParams(randn(rng, 1, 4, 3, 3)), randn(rng, 1, 4, 3, 3))
