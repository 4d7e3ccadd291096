"""Bidirectional WKV attention over flattened image tokens.

The weight a token t places on token i falls off exponentially with
Manhattan index distance, except that the token itself receives a
learnable bonus u:

    wkv_t = [sum_{i!=t} e^{-(|t-i|-1)/T * w + k_i} v_i + e^{u+k_t} v_t]
          / [sum_{i!=t} e^{-(|t-i|-1)/T * w + k_i}     + e^{u+k_t}]

Three implementations live here: a quadratic reference oracle evaluated
literally per output token, an O(T) two-pass scan with streaming
max-exponent stabilization, and an analytic backward pass (also O(T))
for the scan.  All internal math is float64 regardless of the tensor
dtype presented at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import engine
from .engine import Tensor


@dataclass
class WkvParams:
    """Per-channel decay rate w and current-token bonus u."""

    w: Tensor
    u: Tensor

    def __post_init__(self):
        if self.w.ndim != 1 or self.w.shape != self.u.shape:
            raise ValueError(f"w and u must be [C], got {self.w.shape} and {self.u.shape}")
        if not (np.isfinite(self.w.data).all() and np.isfinite(self.u.data).all()):
            raise ValueError("WkvParams must be finite")


@dataclass
class TokenSeq:
    """A [B,T,C] token tensor carrying its source grid shape (row-major)."""

    data: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"TokenSeq data must be [B,T,C], got {self.data.shape}")
        t = self.height * self.width
        if t < 1 or self.data.shape[1] != t:
            raise ValueError(
                f"token count {self.data.shape[1]} != height*width = {self.height}*{self.width}"
            )


def _check_pair(k: TokenSeq, v: TokenSeq, params: WkvParams):
    if k.data.shape != v.data.shape:
        raise ValueError(f"k/v shape mismatch: {k.data.shape} vs {v.data.shape}")
    if k.data.shape[2] != params.w.shape[0]:
        raise ValueError(f"channel mismatch: tokens {k.data.shape[2]}, params {params.w.shape[0]}")
    if not (np.isfinite(k.data.data).all() and np.isfinite(v.data.data).all()):
        raise ValueError("non-finite token values")


# -- reference oracle ---------------------------------------------------


def bi_wkv_oracle_raw(kk, vv, w, u):
    """Literal per-token evaluation, O(T^2), per-row max-exponent shift."""
    kk = np.asarray(kk, dtype=np.float64)
    vv = np.asarray(vv, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    B, T, C = kk.shape
    idx = np.arange(T)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    out = np.empty((B, T, C))
    for b in range(B):
        for c in range(C):
            kb = kk[b, :, c]
            expo = kb[None, :] - (w[c] / T) * (dist - 1.0)
            expo[idx, idx] = u[c] + kb
            expo -= expo.max(axis=1, keepdims=True)
            wt = np.exp(expo)
            out[b, :, c] = (wt @ vv[b, :, c]) / wt.sum(axis=1)
    return out


def bi_wkv_oracle(k: TokenSeq, v: TokenSeq, params: WkvParams) -> TokenSeq:
    _check_pair(k, v, params)
    y = bi_wkv_oracle_raw(k.data.data, v.data.data, params.w.data, params.u.data)
    return TokenSeq(Tensor(y.astype(k.data.dtype)), k.height, k.width)


# -- linear-time scan ---------------------------------------------------


@njit(cache=True)
def _scan_kernel(kk, vv, w, u, out):
    # kk, vv, out: [B,C,T]; w, u: [C].  One (a, b, m) accumulator triple
    # per direction: a = sum e^(x_i - m) v_i, b = sum e^(x_i - m), m = max exponent.
    B, C, T = kk.shape
    as_ = np.empty(T)
    bs_ = np.empty(T)
    ms_ = np.empty(T)
    for b in range(B):
        for c in range(C):
            lam = w[c] / T
            aa = 0.0
            bb = 0.0
            ma = -np.inf
            for t in range(T - 1, -1, -1):
                as_[t] = aa
                bs_[t] = bb
                ms_[t] = ma
                ma = ma - lam
                kt = kk[b, c, t]
                newm = max(ma, kt)
                scale = np.exp(ma - newm)
                ek = np.exp(kt - newm)
                aa = aa * scale + vv[b, c, t] * ek
                bb = bb * scale + ek
                ma = newm
            aa = 0.0
            bb = 0.0
            ma = -np.inf
            for t in range(T):
                e0 = u[c] + kk[b, c, t]
                m = max(max(ma, ms_[t]), e0)
                wp = np.exp(ma - m)
                ws = np.exp(ms_[t] - m)
                w0 = np.exp(e0 - m)
                num = aa * wp + as_[t] * ws + vv[b, c, t] * w0
                den = bb * wp + bs_[t] * ws + w0
                out[b, c, t] = num / den
                ma = ma - lam
                kt = kk[b, c, t]
                newm = max(ma, kt)
                scale = np.exp(ma - newm)
                ek = np.exp(kt - newm)
                aa = aa * scale + vv[b, c, t] * ek
                bb = bb * scale + ek
                ma = newm


@njit(cache=True)
def _backward_kernel(kk, vv, w, u, gg, gk, gv, gw, gu):
    # Shapes as in _scan_kernel; gg is the upstream gradient.  Works in a
    # per-sequence frame shifted by max(k), where every exponential stays
    # finite, so no running-max tracking is needed here.
    B, C, T = kk.shape
    ds = np.empty(T)
    ns = np.empty(T)
    gl = np.empty(T)
    ql = np.empty(T)
    sgs = np.empty(T)
    rgs = np.empty(T)
    sqs = np.empty(T)
    rqs = np.empty(T)
    for b in range(B):
        for c in range(C):
            lam = w[c] / T
            d = np.exp(-lam)
            kmax = kk[b, c, 0]
            for t in range(1, T):
                if kk[b, c, t] > kmax:
                    kmax = kk[b, c, t]
            acc_d = 0.0
            acc_n = 0.0
            for t in range(T - 1, -1, -1):
                ds[t] = acc_d
                ns[t] = acc_n
                ek = np.exp(kk[b, c, t] - kmax)
                acc_d = d * acc_d + ek
                acc_n = d * acc_n + ek * vv[b, c, t]
            acc_d = 0.0
            acc_n = 0.0
            for t in range(T):
                es = np.exp(u[c] + kk[b, c, t] - kmax)
                den = acc_d + ds[t] + es
                y = (acc_n + ns[t] + es * vv[b, c, t]) / den
                gl[t] = gg[b, c, t] / den
                ql[t] = gl[t] * y
                ek = np.exp(kk[b, c, t] - kmax)
                acc_d = d * acc_d + ek
                acc_n = d * acc_n + ek * vv[b, c, t]
            ag = 0.0
            rg = 0.0
            aq = 0.0
            rq = 0.0
            for i in range(T - 1, -1, -1):
                sgs[i] = ag
                rgs[i] = rg
                sqs[i] = aq
                rqs[i] = rq
                rg = d * (rg + ag)
                ag = d * ag + gl[i]
                rq = d * (rq + aq)
                aq = d * aq + ql[i]
            ag = 0.0
            rg = 0.0
            aq = 0.0
            rq = 0.0
            gwc = 0.0
            guc = 0.0
            for i in range(T):
                ek = np.exp(kk[b, c, i] - kmax)
                es = np.exp(u[c] + kk[b, c, i] - kmax)
                sg = ag + sgs[i]
                sq = aq + sqs[i]
                rga = rg + rgs[i]
                rqa = rq + rqs[i]
                gvi = ek * sg + es * gl[i]
                gv[b, c, i] = gvi
                gk[b, c, i] = vv[b, c, i] * gvi - (ek * sq + es * ql[i])
                guc += es * (gl[i] * vv[b, c, i] - ql[i])
                gwc += -(1.0 / T) * ek * (vv[b, c, i] * rga - rqa)
                rg = d * (rg + ag)
                ag = d * ag + gl[i]
                rq = d * (rq + aq)
                aq = d * aq + ql[i]
            gw[c] += gwc
            gu[c] += guc


def _to_bct(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(0, 2, 1))


def bi_wkv_scan_raw(kk, vv, w, u):
    """O(T) scan over raw [B,T,C] arrays; returns float64 [B,T,C]."""
    kb = _to_bct(kk)
    vb = _to_bct(vv)
    out = np.empty_like(kb)
    _scan_kernel(kb, vb, np.asarray(w, dtype=np.float64), np.asarray(u, dtype=np.float64), out)
    return out.transpose(0, 2, 1)


def bi_wkv_backward_raw(kk, vv, w, u, gg):
    """Analytic gradients of the scan output; returns (gk, gv, gw, gu)."""
    kb = _to_bct(kk)
    vb = _to_bct(vv)
    gb = _to_bct(gg)
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    gk = np.empty_like(kb)
    gv = np.empty_like(kb)
    gw = np.zeros_like(w)
    gu = np.zeros_like(u)
    _backward_kernel(kb, vb, w, u, gb, gk, gv, gw, gu)
    return gk.transpose(0, 2, 1), gv.transpose(0, 2, 1), gw, gu


def wkv_attention(k: Tensor, v: Tensor, w: Tensor, u: Tensor) -> Tensor:
    """Autodiff node: scan forward, analytic backward."""
    y = bi_wkv_scan_raw(k.data, v.data, w.data, u.data).astype(k.dtype)

    def backward(g):
        return bi_wkv_backward_raw(k.data, v.data, w.data, u.data, g)

    return engine._make(y, (k, v, w, u), backward)


def bi_wkv_scan(k: TokenSeq, v: TokenSeq, params: WkvParams) -> TokenSeq:
    _check_pair(k, v, params)
    y = wkv_attention(k.data, v.data, params.w, params.u)
    return TokenSeq(y, k.height, k.width)


def bi_wkv_backward(k: TokenSeq, v: TokenSeq, params: WkvParams, grad_out):
    """Gradients (grad_k, grad_v, grad_w, grad_u) as plain arrays."""
    _check_pair(k, v, params)
    gg = grad_out.data.data if isinstance(grad_out, TokenSeq) else np.asarray(grad_out)
    if gg.shape != k.data.shape:
        raise ValueError(f"grad_out shape {gg.shape} != token shape {k.data.shape}")
    return bi_wkv_backward_raw(k.data.data, v.data.data, params.w.data, params.u.data, gg)
