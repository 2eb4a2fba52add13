"""Image and flow quality metrics."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.signal import correlate2d

from .autograd import ContractError, DimensionError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=(0, 0))
    if img.ndim == 2:
        return img
    raise DimensionError(f"expected [3,H,W] or [H,W], got {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the Rec.601 luma."""
    ya, yb = to_luma(a), to_luma(b)
    if ya.shape != yb.shape:
        raise DimensionError(f"ssim shapes differ: {ya.shape} vs {yb.shape}")
    if min(ya.shape) < SSIM_WINDOW:
        raise ContractError(f"image {ya.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    def filt(x):
        return correlate2d(x, win, mode="valid")

    mu_a, mu_b = filt(ya), filt(yb)
    saa = filt(ya * ya) - mu_a ** 2
    sbb = filt(yb * yb) - mu_b ** 2
    sab = filt(ya * yb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def epe(flow, gt, mask: Optional[np.ndarray] = None) -> Optional[float]:
    """Mean end-point error over pixels where ``mask`` is true; ``None`` if none are."""
    flow, gt = np.asarray(flow, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if flow.shape != gt.shape or flow.shape[-3] != 2:
        raise DimensionError(f"epe shapes: {flow.shape} vs {gt.shape}")
    err = np.sqrt(((flow - gt) ** 2).sum(axis=-3))
    if mask is None:
        return float(err.mean())
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), err.shape)
    if not mask.any():
        return None
    return float(err[mask].mean())
