"""The FS-RWKV block: gated spatial mix and channel mix over image tokens.

Both mixes run behind pre-norm residual connections.  The spatial mix
routes frequency-spatial shifted projections through bidirectional WKV
attention; the channel mix is a squared-ReLU MLP with a 4x hidden
expansion, gated by a sigmoid receptance.  Output projections start at
zero so a freshly initialized block is the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .shift import (
    FsoShiftParams,
    ShiftSpec,
    UniShiftParams,
    fso_shift,
    init_shift_params,
    init_uni_shift_params,
    uni_shift,
)
from .wkv import TokenSeq, WkvParams, bi_wkv_scan

LN_EPS = 1e-5


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class SpatialMixParams:
    w_r: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    wkv: WkvParams
    shifts: tuple  # FsoShiftParams for the R, K, V paths


@dataclass
class ChannelMixParams:
    w_r: Tensor  # [C, C]
    w_k: Tensor  # [C, 4C]
    w_v: Tensor  # [4C, C]
    w_o: Tensor  # [C, C]
    shifts: tuple  # FsoShiftParams for the R, K paths


@dataclass
class BlockParams:
    ln1: LayerNormParams
    ln2: LayerNormParams
    spatial: SpatialMixParams
    channel: ChannelMixParams


def tokens_to_map(x: Tensor, height, width) -> Tensor:
    b, t, c = x.shape
    return x.reshape(b, height, width, c).transpose(0, 3, 1, 2)


def map_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b, h * w, c)


def _shifted(x: TokenSeq, spec: ShiftSpec, params) -> Tensor:
    m = tokens_to_map(x.data, x.height, x.width)
    if isinstance(params, UniShiftParams):
        return map_to_tokens(uni_shift(m, spec, params))
    return map_to_tokens(fso_shift(m, spec, params))


def spatial_mix(x: TokenSeq, p: SpatialMixParams, spec: ShiftSpec) -> TokenSeq:
    r = _shifted(x, spec, p.shifts[0]) @ p.w_r
    k = _shifted(x, spec, p.shifts[1]) @ p.w_k
    v = _shifted(x, spec, p.shifts[2]) @ p.w_v
    att = bi_wkv_scan(
        TokenSeq(k, x.height, x.width), TokenSeq(v, x.height, x.width), p.wkv
    )
    out = (engine.sigmoid(r) * att.data) @ p.w_o
    return TokenSeq(out, x.height, x.width)


def channel_mix(x: TokenSeq, p: ChannelMixParams, spec: ShiftSpec) -> TokenSeq:
    r = _shifted(x, spec, p.shifts[0]) @ p.w_r
    k = _shifted(x, spec, p.shifts[1]) @ p.w_k
    kk = engine.relu(k)
    v = (kk * kk) @ p.w_v
    out = (engine.sigmoid(r) * v) @ p.w_o
    return TokenSeq(out, x.height, x.width)


def fsrwkv_block(x: TokenSeq, params: BlockParams, spec: ShiftSpec) -> TokenSeq:
    h = engine.layer_norm(x.data, params.ln1.gamma, params.ln1.beta, LN_EPS)
    x = TokenSeq(
        x.data + spatial_mix(TokenSeq(h, x.height, x.width), params.spatial, spec).data,
        x.height,
        x.width,
    )
    h = engine.layer_norm(x.data, params.ln2.gamma, params.ln2.beta, LN_EPS)
    return TokenSeq(
        x.data + channel_mix(TokenSeq(h, x.height, x.width), params.channel, spec).data,
        x.height,
        x.width,
    )


# -- initialization ------------------------------------------------------


def orthogonal_init(rng, n_in, n_out, scale=1.0, dtype=np.float32):
    """Orthogonal matrix (sign-fixed QR) scaled; rectangular allowed."""
    big, small = max(n_in, n_out), min(n_in, n_out)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    w = q if n_in >= n_out else q.T
    return np.ascontiguousarray(w * scale, dtype=dtype)


def init_wkv_params(C, dtype=np.float32, requires_grad=True):
    """Decay ramps from 0 to 3 across channels; bonus fades 0.5 -> 0."""
    w = np.linspace(0.0, 3.0, C).astype(dtype)
    u = (0.5 * (1.0 - np.arange(C) / C)).astype(dtype)
    return WkvParams(Tensor(w, requires_grad=requires_grad), Tensor(u, requires_grad=requires_grad))


def init_layer_norm(C, dtype=np.float32) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(C, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(C, dtype=dtype), requires_grad=True),
    )


def init_block_params(C, rng, dtype=np.float32, use_fso=True) -> BlockParams:
    scale = 1.0 / np.sqrt(C)

    def proj(n_in, n_out):
        return Tensor(orthogonal_init(rng, n_in, n_out, scale, dtype), requires_grad=True)

    def zeros(n_in, n_out):
        return Tensor(np.zeros((n_in, n_out), dtype=dtype), requires_grad=True)

    def ln():
        return init_layer_norm(C, dtype)

    def shift():
        return init_shift_params(C, dtype) if use_fso else init_uni_shift_params(C, dtype)

    spatial = SpatialMixParams(
        w_r=proj(C, C),
        w_k=proj(C, C),
        w_v=proj(C, C),
        w_o=zeros(C, C),
        wkv=init_wkv_params(C, dtype),
        shifts=tuple(shift() for _ in range(3)),
    )
    channel = ChannelMixParams(
        w_r=proj(C, C),
        w_k=proj(C, 4 * C),
        w_v=proj(4 * C, C),
        w_o=zeros(C, C),
        shifts=tuple(shift() for _ in range(2)),
    )
    return BlockParams(ln1=ln(), ln2=ln(), spatial=spatial, channel=channel)
