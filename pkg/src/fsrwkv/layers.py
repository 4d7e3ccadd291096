"""Parameter-carrying layer structs shared by SFEB and the U-Net."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor


@dataclass
class Conv2d:
    """Convolution weights plus the call geometry they were built for."""

    w: Tensor
    b: Tensor
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return engine.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding, groups=self.groups)


def make_conv(rng, c_in, c_out, k, stride=1, groups=1, dtype=np.float32, gain=2.0):
    """He-style fan-in init, zero bias, same-padding for odd kernels."""
    fan_in = (c_in // groups) * k * k
    w = rng.standard_normal((c_out, c_in // groups, k, k)) * np.sqrt(gain / fan_in)
    return Conv2d(
        w=Tensor(w.astype(dtype), requires_grad=True),
        b=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        stride=stride,
        padding=(k - 1) // 2,
        groups=groups,
    )


def delta_conv(c_in, c_out, k, groups=1, dtype=np.float64):
    """Identity convolution: center-tap delta kernels, zero bias.

    For c_out != c_in the kernel routes input channel i to output
    channel i (mod c_in per group block), which makes 1x1 reducers of
    concatenated copies pick the first copy.
    """
    w = np.zeros((c_out, c_in // groups, k, k), dtype=dtype)
    center = (k - 1) // 2
    per_group = c_in // groups
    for o in range(c_out):
        w[o, o % per_group, center, center] = 1.0
    return Conv2d(
        w=Tensor(w, requires_grad=True),
        b=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        padding=(k - 1) // 2,
        groups=groups,
    )
