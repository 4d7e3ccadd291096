"""Skip-connection feature enhancement with paired spatial and wavelet paths.

The block refines an encoder feature map along two branches and blends
them with a learned scalar gate per sample:

* spatial branch: 3x3 conv -> channel LayerNorm -> ReLU -> large/small
  separable conv stack;
* frequency branch: a single-level Haar split; the low-pass band runs
  through parallel 3x3/5x5/7x7 convs, a 1x1 reducer, and the separable
  stack, while the three detail bands are concatenated, run through
  their own parallel convs and reducer, normalized, rectified, passed
  through a depthwise-separable conv, and recombined with the refined
  low-pass band by the inverse transform.

The gate is a softmax over two logits computed from globally pooled
features of both branches, so the convex weights always sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine
from .block import LN_EPS, LayerNormParams, init_layer_norm
from .engine import Tensor
from .layers import Conv2d, make_conv
from .wavelet import WaveletPyramid, dwt2, idwt2


@dataclass
class LsConvParams:
    """Stand-in for a large-separable conv: depthwise 7x7 -> depthwise 3x3 -> pointwise 1x1."""

    dw7: Conv2d
    dw3: Conv2d
    pw: Conv2d


@dataclass
class SfebParams:
    spatial_conv: Conv2d
    spatial_ln: LayerNormParams
    spatial_ls: LsConvParams
    ll_conv3: Conv2d
    ll_conv5: Conv2d
    ll_conv7: Conv2d
    ll_reduce: Conv2d
    ll_ls: LsConvParams
    hf_conv3: Conv2d
    hf_conv5: Conv2d
    hf_conv7: Conv2d
    hf_reduce: Conv2d
    hf_ln: Optional[LayerNormParams]
    hf_dw: Conv2d
    hf_pw: Conv2d
    gate_w: Tensor
    gate_b: Tensor


def init_lsconv(rng, channels, dtype=np.float32) -> LsConvParams:
    return LsConvParams(
        dw7=make_conv(rng, channels, channels, 7, groups=channels, dtype=dtype),
        dw3=make_conv(rng, channels, channels, 3, groups=channels, dtype=dtype),
        pw=make_conv(rng, channels, channels, 1, dtype=dtype),
    )


def init_sfeb_params(rng, channels, dtype=np.float32) -> SfebParams:
    c = channels
    return SfebParams(
        spatial_conv=make_conv(rng, c, c, 3, dtype=dtype),
        spatial_ln=init_layer_norm(c, dtype=dtype),
        spatial_ls=init_lsconv(rng, c, dtype=dtype),
        ll_conv3=make_conv(rng, c, c, 3, dtype=dtype),
        ll_conv5=make_conv(rng, c, c, 5, dtype=dtype),
        ll_conv7=make_conv(rng, c, c, 7, dtype=dtype),
        ll_reduce=make_conv(rng, 3 * c, c, 1, dtype=dtype),
        ll_ls=init_lsconv(rng, c, dtype=dtype),
        hf_conv3=make_conv(rng, 3 * c, 3 * c, 3, dtype=dtype),
        hf_conv5=make_conv(rng, 3 * c, 3 * c, 5, dtype=dtype),
        hf_conv7=make_conv(rng, 3 * c, 3 * c, 7, dtype=dtype),
        hf_reduce=make_conv(rng, 9 * c, 3 * c, 1, dtype=dtype),
        hf_ln=init_layer_norm(3 * c, dtype=dtype),
        hf_dw=make_conv(rng, 3 * c, 3 * c, 3, groups=3 * c, dtype=dtype),
        hf_pw=make_conv(rng, 3 * c, 3 * c, 1, dtype=dtype),
        gate_w=Tensor(np.zeros((2 * c, 2), dtype=dtype), requires_grad=True),
        gate_b=Tensor(np.zeros(2, dtype=dtype), requires_grad=True),
    )


def map_layer_norm(x: Tensor, ln: LayerNormParams) -> Tensor:
    """LayerNorm over the channel axis of a [B, C, H, W] map."""
    t = x.transpose(0, 2, 3, 1)
    t = engine.layer_norm(t, ln.gamma, ln.beta, eps=LN_EPS)
    return t.transpose(0, 3, 1, 2)


def lsconv_standin(x: Tensor, p: LsConvParams) -> Tensor:
    return p.pw(p.dw3(p.dw7(x)))


def spatial_branch(f_in: Tensor, p: SfebParams) -> Tensor:
    s = p.spatial_conv(f_in)
    s = map_layer_norm(s, p.spatial_ln)
    s = s.relu()
    return lsconv_standin(s, p.spatial_ls)


def frequency_branch(f_in: Tensor, p: SfebParams) -> Tensor:
    c = f_in.data.shape[1]
    pyr = dwt2(f_in)

    ll = engine.concat([p.ll_conv3(pyr.ll), p.ll_conv5(pyr.ll), p.ll_conv7(pyr.ll)], axis=1)
    ll = p.ll_reduce(ll)
    ll_refined = lsconv_standin(ll, p.ll_ls)

    hf = engine.concat([pyr.lh, pyr.hl, pyr.hh], axis=1)
    hf = engine.concat([p.hf_conv3(hf), p.hf_conv5(hf), p.hf_conv7(hf)], axis=1)
    hf = p.hf_reduce(hf)
    if p.hf_ln is not None:
        hf = map_layer_norm(hf, p.hf_ln)
    hf = hf.relu()
    hf_refined = p.hf_pw(p.hf_dw(hf))

    return idwt2(
        WaveletPyramid(
            ll=ll_refined,
            lh=engine.narrow(hf_refined, 1, 0, c),
            hl=engine.narrow(hf_refined, 1, c, c),
            hh=engine.narrow(hf_refined, 1, 2 * c, c),
        )
    )


def branch_gates(f_freq: Tensor, f_spatial: Tensor, p: SfebParams) -> Tensor:
    """Convex fusion weights [B, 2]: column 0 frequency, column 1 spatial."""
    pooled = engine.concat([f_freq, f_spatial], axis=1).mean(axis=(2, 3))
    return engine.softmax_lastdim(pooled @ p.gate_w + p.gate_b)


def sfeb_forward(f_in: Tensor, p: SfebParams) -> Tensor:
    if f_in.data.ndim != 4:
        raise ValueError(f"expected a [B, C, H, W] map, got shape {f_in.data.shape}")
    b, _, h, w = f_in.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even for the wavelet split, got {h}x{w}")

    f_spatial = spatial_branch(f_in, p)
    f_freq = frequency_branch(f_in, p)

    gates = branch_gates(f_freq, f_spatial, p)
    w_freq = engine.narrow(gates, 1, 0, 1).reshape(b, 1, 1, 1)
    w_spatial = engine.narrow(gates, 1, 1, 1).reshape(b, 1, 1, 1)

    out = w_freq * f_freq + w_spatial * f_spatial
    if not np.isfinite(out.data).all():
        raise engine.NumericalError("non-finite activations in sfeb_forward")
    return out
