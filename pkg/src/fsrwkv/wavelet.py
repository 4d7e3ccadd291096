"""Single-level orthonormal Haar transform on 2D feature maps.

Analysis splits a [B,C,H,W] map into four half-resolution bands (LL, LH,
HL, HH); synthesis inverts it exactly.  The transform is orthonormal, so
the adjoint of each direction is the other one, which is all the backward
passes need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor


@dataclass
class WaveletPyramid:
    """The four subbands of one analysis level, each [B,C,H/2,W/2]."""

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self):
        shapes = {self.ll.shape, self.lh.shape, self.hl.shape, self.hh.shape}
        if len(shapes) != 1:
            raise ValueError(f"wavelet bands must share one shape, got {sorted(shapes)}")


def _analysis(x):
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a + b - c - d) * 0.5
    hl = (a - b + c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return np.concatenate([ll, lh, hl, hh], axis=1)


def _synthesis(bands):
    n = bands.shape[1] // 4
    ll = bands[:, 0 * n : 1 * n]
    lh = bands[:, 1 * n : 2 * n]
    hl = bands[:, 2 * n : 3 * n]
    hh = bands[:, 3 * n : 4 * n]
    B, C, h, w = ll.shape
    out = np.empty((B, C, 2 * h, 2 * w), dtype=bands.dtype)
    out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def dwt2(x: Tensor) -> WaveletPyramid:
    """Haar analysis of an even-sized map into a WaveletPyramid."""
    if x.ndim != 4:
        raise ValueError(f"dwt2 expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"dwt2 requires even spatial dims, got {H}x{W}")

    def backward(g):
        return (_synthesis(g),)

    stacked = engine._make(_analysis(x.data), (x,), backward)
    return WaveletPyramid(
        ll=engine.narrow(stacked, 1, 0 * C, C),
        lh=engine.narrow(stacked, 1, 1 * C, C),
        hl=engine.narrow(stacked, 1, 2 * C, C),
        hh=engine.narrow(stacked, 1, 3 * C, C),
    )


def idwt2(p: WaveletPyramid) -> Tensor:
    """Exact inverse of dwt2."""
    bands = engine.concat([p.ll, p.lh, p.hl, p.hh], axis=1)

    def backward(g):
        return (_analysis(g),)

    return engine._make(_synthesis(bands.data), (bands,), backward)
