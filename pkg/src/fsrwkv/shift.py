"""Omnidirectional token shifting with a wavelet low-frequency branch.

Channels are partitioned across a dictionary of pixel offsets, weighted
by inverse Manhattan distance, and each channel block is translated by
its offset (zero fill).  The full shift runs the same partition on both
the raw map and the LL wavelet band, leaving the high-frequency bands
untouched, and blends the three signals through per-channel sigmoid
gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine, wavelet
from .engine import Tensor

CARDINAL_OFFSETS = ((0, 1), (0, -1), (1, 0), (-1, 0))
NEIGHBORHOOD_8 = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass
class ShiftSpec:
    """Offset dictionary with its channel partition (ordering matches)."""

    offsets: tuple
    weights: tuple
    partition: tuple

    def __post_init__(self):
        if (0, 0) in self.offsets:
            raise ValueError("zero offset is not a shift")
        if len(self.offsets) != len(self.partition):
            raise ValueError("partition/offsets length mismatch")

    @property
    def channels(self):
        return sum(self.partition)


@dataclass
class FsoShiftParams:
    """Raw (pre-sigmoid) per-channel gate parameters."""

    omega_spatial: Tensor
    omega_ll: Tensor
    omega_out: Tensor


def init_shift_params(C, dtype=np.float32, requires_grad=True):
    """Gates start at 0.5 (raw zeros)."""
    return FsoShiftParams(
        omega_spatial=Tensor(np.zeros(C, dtype=dtype), requires_grad=requires_grad),
        omega_ll=Tensor(np.zeros(C, dtype=dtype), requires_grad=requires_grad),
        omega_out=Tensor(np.zeros(C, dtype=dtype), requires_grad=requires_grad),
    )


def build_shift_spec(C, offsets=NEIGHBORHOOD_8) -> ShiftSpec:
    """Apportion C channels across offsets by inverse Manhattan distance.

    Counts are k * w_p rounded by largest remainder so they always sum
    to exactly C.
    """
    offsets = tuple((int(dy), int(dx)) for dy, dx in offsets)
    if not offsets:
        raise ValueError("offset dictionary is empty")
    if (0, 0) in offsets:
        raise ValueError("zero offset is not a shift")
    if C < len(offsets):
        raise ValueError(f"C={C} smaller than offset count {len(offsets)}")
    weights = tuple(1.0 / (abs(dy) + abs(dx)) for dy, dx in offsets)
    k = C / sum(weights)
    ideal = [k * w for w in weights]
    counts = [int(np.floor(q)) for q in ideal]
    leftover = C - sum(counts)
    fracs = np.array([q - np.floor(q) for q in ideal])
    for idx in np.argsort(-fracs, kind="stable")[:leftover]:
        counts[idx] += 1
    return ShiftSpec(offsets=offsets, weights=weights, partition=tuple(counts))


def omni_shift(x: Tensor, spec: ShiftSpec) -> Tensor:
    """Translate each channel block by its assigned offset, zero fill."""
    if x.shape[1] != spec.channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec covers {spec.channels}")
    parts = []
    start = 0
    for (dy, dx), count in zip(spec.offsets, spec.partition):
        if count == 0:
            continue
        block = engine.narrow(x, 1, start, count)
        parts.append(engine.translate2d(block, dy, dx))
        start += count
    return engine.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def _gate(raw: Tensor) -> Tensor:
    return engine.sigmoid(raw).reshape(1, raw.shape[0], 1, 1)


def fso_shift(x: Tensor, spec: ShiftSpec, params: FsoShiftParams) -> Tensor:
    """Gated spatial shift plus gated LL-band shift, high bands untouched."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"fso_shift requires even spatial dims, got {H}x{W}")
    ws = _gate(params.omega_spatial)
    wl = _gate(params.omega_ll)
    wo = _gate(params.omega_out)

    s_out = ws * omni_shift(x, spec) + (1.0 - ws) * x

    p = wavelet.dwt2(x)
    spec_ll = build_shift_spec(p.ll.shape[1], spec.offsets)
    f_out = wl * omni_shift(p.ll, spec_ll) + (1.0 - wl) * p.ll
    o_freq = wavelet.idwt2(wavelet.WaveletPyramid(f_out, p.lh, p.hl, p.hh))

    o_final = s_out + o_freq
    return wo * o_final + (1.0 - wo) * x


# -- single-direction baseline ----------------------------------------------

UNI_OFFSET = ((0, 1),)


@dataclass
class UniShiftParams:
    """Blend gate for the single-direction shift baseline (no wavelet branch)."""

    omega: Tensor


def init_uni_shift_params(C, dtype=np.float32, requires_grad=True):
    return UniShiftParams(omega=Tensor(np.zeros(C, dtype=dtype), requires_grad=requires_grad))


def uni_shift(x: Tensor, spec: ShiftSpec, params: UniShiftParams) -> Tensor:
    """Gated blend of the input with its one-offset shifted copy."""
    if len(spec.offsets) != 1:
        raise ValueError(f"uni_shift expects a single-offset spec, got {len(spec.offsets)}")
    w = _gate(params.omega)
    return w * omni_shift(x, spec) + (1.0 - w) * x
