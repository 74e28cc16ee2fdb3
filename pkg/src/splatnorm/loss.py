"""Training objectives and image-quality metrics.

The total objective is a convex combination of the 2D and 3D branch losses,
L = (1 - lambda) L2D + lambda L3D, each branch an MSE plus an optional
perceptual term weighted by beta. The perceptual slot is any callable
(a, b) -> scalar; it is disabled by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import InvalidInputError
from .rasterizer import RenderOutput

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = 0.05
    beta: float = 0.05
    perceptual: Callable[[np.ndarray, np.ndarray], float] | None = None

    def __post_init__(self):
        if not 0 <= self.lambda_ <= 1:
            raise InvalidInputError("lambda_ must lie in [0, 1]")
        if self.beta < 0:
            raise InvalidInputError("beta must be non-negative")


def _check_shapes(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def _branch_loss(rendered, gt, config: LossConfig) -> float:
    value = mse(rendered, gt)
    if config.perceptual is not None:
        p = float(config.perceptual(rendered, gt))
        if not np.isfinite(p) or p < 0:
            raise InvalidInputError("perceptual term must be finite and non-negative")
        value += config.beta * p
    return value


def loss2d(rendered2d, gt, config: LossConfig | None = None) -> float:
    return _branch_loss(rendered2d, gt, config or LossConfig())


def loss3d(rendered3d, gt, config: LossConfig | None = None) -> float:
    return _branch_loss(rendered3d, gt, config or LossConfig())


def total_loss(rendered2d, rendered3d, gt, config: LossConfig | None = None) -> float:
    config = config or LossConfig()
    l2 = loss2d(rendered2d, gt, config)
    l3 = loss3d(rendered3d, gt, config)
    return (1.0 - config.lambda_) * l2 + config.lambda_ * l3


def psnr(a, b, peak: float = 1.0) -> float:
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(peak * peak / err)), PSNR_CAP)


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    radius = (SSIM_WINDOW - 1) // 2
    filt = lambda x: gaussian_filter(x, sigma=SSIM_SIGMA, radius=radius)
    ux = filt(a)
    uy = filt(b)
    vx = filt(a * a) - ux * ux
    vy = filt(b * b) - uy * uy
    vxy = filt(a * b) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s[radius:-radius, radius:-radius].mean())


def ssim(a, b) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), k1=0.01,
    k2=0.03, peak 1.0, border crop of half a window, channels averaged.
    """
    a, b = _check_shapes(a, b)
    if a.ndim not in (2, 3) or min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidInputError("images must be at least 11x11")
    if a.ndim == 2:
        return _ssim_channel(a, b)
    return float(np.mean([_ssim_channel(a[..., k], b[..., k]) for k in range(a.shape[2])]))


def hole_fraction(out: RenderOutput, w_thresh: float = 0.5) -> float:
    """Fraction of pixels whose accumulated compositing weight falls below
    w_thresh: the under-covered pixels that read as holes.
    """
    return float(np.mean(out.weight_sum < w_thresh))


def metrics_record(a, b, out: RenderOutput | None = None, w_thresh: float = 0.5) -> dict:
    record = {"psnr": psnr(a, b), "ssim": ssim(a, b), "mse": mse(a, b)}
    if out is not None:
        record["hole_fraction"] = hole_fraction(out, w_thresh)
    return record
