"""Composite training loss and evaluation metrics for paired image translation.

Loss: smooth-L1 + 0.4 * (1 - SSIM) + 0.3 * Sobel edge loss, all averaged
over every element.  SSIM follows the canonical single-scale definition
(11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, dynamic range
1.0, valid window positions only).  Metrics (PSNR / RMSE) operate on plain
arrays in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import engine
from .engine import Tensor

LAMBDA_SSIM = 0.4
LAMBDA_EDGE = 0.3

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

EDGE_EPS = 1e-8

PSNR_CAP_DB = 99.0

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()

_kernel_cache: dict = {}


@dataclass
class LossBreakdown:
    l1: Tensor
    ssim_loss: Tensor
    edge: Tensor
    total: Tensor
    lambdas: Tuple[float, float]


def _check_pair(pred: Tensor, gt: Tensor):
    if pred.data.ndim != 4 or gt.data.ndim != 4:
        raise ValueError("expected [B, C, H, W] images")
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian tap matrix [size, size]."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _depthwise_kernel(taps: np.ndarray, channels: int, dtype) -> Tensor:
    key = (taps.tobytes(), channels, np.dtype(dtype).str)
    got = _kernel_cache.get(key)
    if got is None:
        k = np.broadcast_to(taps.astype(dtype), (channels, 1) + taps.shape).copy()
        got = Tensor(k)
        _kernel_cache[key] = got
    return got


def smooth_l1(pred: Tensor, gt: Tensor) -> Tensor:
    _check_pair(pred, gt)
    d = pred - gt
    ad = d.abs()
    quad = d * d * 0.5
    lin = ad - 0.5
    return engine.where(ad.data < 1.0, quad, lin).mean()


def ssim(pred: Tensor, gt: Tensor) -> Tensor:
    _check_pair(pred, gt)
    b, c, h, w = pred.data.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {h}x{w}")
    win = _depthwise_kernel(gaussian_window(), c, pred.data.dtype)

    def filt(x):
        return engine.conv2d(x, win, groups=c)

    mu1 = filt(pred)
    mu2 = filt(gt)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu1_mu2 = mu1 * mu2
    sigma1_sq = filt(pred * pred) - mu1_sq
    sigma2_sq = filt(gt * gt) - mu2_sq
    sigma12 = filt(pred * gt) - mu1_mu2

    num = (mu1_mu2 * 2.0 + SSIM_C1) * (sigma12 * 2.0 + SSIM_C2)
    den = (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    return (num / den).mean()


def ssim_loss(pred: Tensor, gt: Tensor) -> Tensor:
    return 1.0 - ssim(pred, gt)


def sobel_magnitude(x: Tensor) -> Tensor:
    """Per-channel Sobel gradient magnitude with replicate border padding."""
    c = x.data.shape[1]
    kx = _depthwise_kernel(_SOBEL_X, c, x.data.dtype)
    ky = _depthwise_kernel(_SOBEL_Y, c, x.data.dtype)
    xp = engine.pad2d_replicate(x, 1)
    gx = engine.conv2d(xp, kx, groups=c)
    gy = engine.conv2d(xp, ky, groups=c)
    return (gx * gx + gy * gy + EDGE_EPS).sqrt()


def edge_loss(pred: Tensor, gt: Tensor) -> Tensor:
    _check_pair(pred, gt)
    return (sobel_magnitude(pred) - sobel_magnitude(gt)).abs().mean()


def total_loss(pred: Tensor, gt: Tensor, lambdas: Tuple[float, float] = (LAMBDA_SSIM, LAMBDA_EDGE)) -> LossBreakdown:
    lam_ssim, lam_edge = float(lambdas[0]), float(lambdas[1])
    l1 = smooth_l1(pred, gt)
    s = ssim_loss(pred, gt)
    e = edge_loss(pred, gt)
    total = l1 + s * lam_ssim + e * lam_edge
    return LossBreakdown(l1=l1, ssim_loss=s, edge=e, total=total, lambdas=(lam_ssim, lam_edge))


# -- metrics (plain arrays, no autodiff) ------------------------------------


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """PSNR in dB for images on dynamic range [0, 1]; +inf for identical inputs."""
    mse = rmse(pred, gt) ** 2
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def cap_psnr(db: float, cap: float = PSNR_CAP_DB) -> float:
    """Clamp the +inf sentinel (and anything above it) for report tables."""
    return min(float(db), cap)
