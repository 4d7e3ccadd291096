import dataclasses

import numpy as np
import pytest

from conftest import gradcheck, leaf

from fsrwkv import engine, sfeb
from fsrwkv.engine import NumericalError, Tensor
from fsrwkv.layers import delta_conv
from fsrwkv.sfeb import (
    LsConvParams,
    SfebParams,
    branch_gates,
    frequency_branch,
    init_sfeb_params,
    lsconv_standin,
    sfeb_forward,
    spatial_branch,
)
from fsrwkv.wavelet import dwt2


def collect_tensors(obj):
    if isinstance(obj, Tensor):
        return [obj]
    if dataclasses.is_dataclass(obj):
        out = []
        for f in dataclasses.fields(obj):
            out.extend(collect_tensors(getattr(obj, f.name)))
        return out
    if isinstance(obj, (list, tuple)):
        return [t for item in obj for t in collect_tensors(item)]
    return []


def delta_lsconv(c, dtype=np.float64):
    return LsConvParams(
        dw7=delta_conv(c, c, 7, groups=c, dtype=dtype),
        dw3=delta_conv(c, c, 3, groups=c, dtype=dtype),
        pw=delta_conv(c, c, 1, dtype=dtype),
    )


def identity_frequency_params(c, rng, dtype=np.float64):
    """Delta kernels on the whole frequency path, LN bypassed, random spatial path."""
    p = init_sfeb_params(rng, c, dtype=dtype)
    return dataclasses.replace(
        p,
        ll_conv3=delta_conv(c, c, 3, dtype=dtype),
        ll_conv5=delta_conv(c, c, 5, dtype=dtype),
        ll_conv7=delta_conv(c, c, 7, dtype=dtype),
        ll_reduce=delta_conv(3 * c, c, 1, dtype=dtype),
        ll_ls=delta_lsconv(c, dtype=dtype),
        hf_conv3=delta_conv(3 * c, 3 * c, 3, dtype=dtype),
        hf_conv5=delta_conv(3 * c, 3 * c, 5, dtype=dtype),
        hf_conv7=delta_conv(3 * c, 3 * c, 7, dtype=dtype),
        hf_reduce=delta_conv(9 * c, 3 * c, 1, dtype=dtype),
        hf_ln=None,
        hf_dw=delta_conv(3 * c, 3 * c, 3, groups=3 * c, dtype=dtype),
        hf_pw=delta_conv(3 * c, 3 * c, 1, dtype=dtype),
    )


def nonneg_detail_image(rng, b, c, h, w):
    """Image whose Haar detail coefficients are all nonnegative.

    Each 2x2 block is [[a, v], [v, v]] with a >= v, so LH = HL = HH =
    (a - v) / 2 >= 0.
    """
    base = rng.uniform(0.2, 0.6, size=(b, c, h // 2, w // 2))
    bump = rng.uniform(0.0, 0.4, size=(b, c, h // 2, w // 2))
    x = np.empty((b, c, h, w))
    x[:, :, 0::2, 0::2] = base + bump
    x[:, :, 0::2, 1::2] = base
    x[:, :, 1::2, 0::2] = base
    x[:, :, 1::2, 1::2] = base
    return x


# -- lsconv stand-in -------------------------------------------------------


def test_lsconv_identity_delta_kernels(rng):
    x = leaf(rng, (2, 3, 8, 8))
    y = lsconv_standin(x, delta_lsconv(3))
    np.testing.assert_allclose(y.data, x.data, atol=1e-14)


def test_lsconv_constant_interior(rng):
    c = 4
    p = delta_lsconv(c)
    # Kernel-sum-normalized weights: every depthwise kernel averages, the
    # pointwise stage mixes channels with rows summing to one.
    p.dw7.w.data[:] = 1.0 / 49.0
    p.dw3.w.data[:] = 1.0 / 9.0
    mix = rng.uniform(0.1, 1.0, size=(c, c, 1, 1))
    p.pw.w.data[:] = mix / mix.sum(axis=1, keepdims=True)
    x = Tensor(np.full((1, c, 16, 16), 0.7))
    y = lsconv_standin(x, p)
    interior = y.data[:, :, 4:-4, 4:-4]
    np.testing.assert_allclose(interior, 0.7, rtol=1e-12)


def test_lsconv_shape_contract(rng):
    x = leaf(rng, (2, 8, 16, 16))
    p = sfeb.init_lsconv(rng, 8, dtype=np.float64)
    assert lsconv_standin(x, p).data.shape == (2, 8, 16, 16)


# -- full block ------------------------------------------------------------


def test_sfeb_shape_preserved(rng):
    for shape in [(1, 2, 4, 4), (2, 3, 8, 6), (1, 4, 10, 14)]:
        p = init_sfeb_params(rng, shape[1], dtype=np.float64)
        x = leaf(rng, shape, scale=0.5)
        assert sfeb_forward(x, p).data.shape == shape


def test_sfeb_odd_dims_rejected(rng):
    p = init_sfeb_params(rng, 2, dtype=np.float64)
    with pytest.raises(ValueError):
        sfeb_forward(leaf(rng, (1, 2, 5, 6)), p)
    with pytest.raises(ValueError):
        sfeb_forward(leaf(rng, (1, 2, 6, 5)), p)


def test_sfeb_nonfinite_input_rejected(rng):
    p = init_sfeb_params(rng, 2, dtype=np.float64)
    x = leaf(rng, (1, 2, 4, 4))
    x.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        sfeb_forward(x, p)


def test_gate_simplex_100_seeds():
    c = 3
    for seed in range(100):
        r = np.random.default_rng(seed)
        p = init_sfeb_params(r, c, dtype=np.float64)
        p.gate_w.data[:] = r.standard_normal((2 * c, 2)) * 2.0
        p.gate_b.data[:] = r.standard_normal(2) * 2.0
        f_freq = leaf(r, (2, c, 4, 4))
        f_spatial = leaf(r, (2, c, 4, 4))
        g = branch_gates(f_freq, f_spatial, p).data
        assert (g >= 0).all()
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-6)


def test_gate_zero_init_is_balanced(rng):
    p = init_sfeb_params(rng, 2, dtype=np.float64)
    x = leaf(rng, (2, 2, 4, 4))
    g = branch_gates(frequency_branch(x, p), spatial_branch(x, p), p).data
    assert np.array_equal(g, np.full((2, 2), 0.5))


def test_gate_saturated_spatial_branch(rng):
    c = 3
    p = init_sfeb_params(rng, c, dtype=np.float64)
    p.gate_b.data[:] = [-100.0, 100.0]
    x = leaf(rng, (2, c, 8, 8), scale=0.5)
    out = sfeb_forward(x, p)
    expected = spatial_branch(x, p)
    assert np.array_equal(out.data, expected.data)


def test_identity_frequency_path(rng):
    c = 2
    p = identity_frequency_params(c, rng)
    p.gate_b.data[:] = [100.0, -100.0]
    x = Tensor(nonneg_detail_image(rng, 1, c, 8, 8), requires_grad=True)
    out = sfeb_forward(x, p)
    assert np.abs(out.data - x.data).max() <= 1e-4


def test_detail_energy_drops_when_hf_refinement_zeroed(rng):
    c = 2
    p = init_sfeb_params(rng, c, dtype=np.float64)
    p.hf_pw.w.data[:] = 0.0
    p.hf_pw.b.data[:] = 0.0
    x = leaf(rng, (1, c, 8, 8), scale=0.5)
    f_freq = frequency_branch(x, p)

    def detail_norm(t):
        pyr = dwt2(t)
        return float(
            np.sqrt(sum((band.data**2).sum() for band in (pyr.lh, pyr.hl, pyr.hh)))
        )

    assert detail_norm(f_freq) <= detail_norm(x) + 1e-12
    assert detail_norm(f_freq) <= 1e-10  # synthesis from exactly zero details


# -- gradients ---------------------------------------------------------------


def test_sfeb_gradcheck_all_params(rng):
    c = 2
    p = init_sfeb_params(rng, c, dtype=np.float64)
    # Nonzero gate parameters so the fusion weights carry gradient signal.
    p.gate_w.data[:] = rng.standard_normal((2 * c, 2)) * 0.5
    p.gate_b.data[:] = rng.standard_normal(2) * 0.1
    x = leaf(rng, (1, c, 4, 4), scale=0.5)
    probe = Tensor(rng.standard_normal((1, c, 4, 4)))

    def build():
        return (sfeb_forward(x, p) * probe).sum()

    gradcheck(build, [x] + collect_tensors(p), max_indices=48)


def test_sfeb_gradcheck_input_full(rng):
    p = init_sfeb_params(rng, 4, dtype=np.float64)
    p.gate_w.data[:] = rng.standard_normal((8, 2)) * 0.5
    x = leaf(rng, (1, 4, 8, 8), scale=0.5)
    probe = Tensor(rng.standard_normal((1, 4, 8, 8)))

    def build():
        return (sfeb_forward(x, p) * probe).sum()

    gradcheck(build, [x])
