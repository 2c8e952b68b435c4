"""PSNR and SSIM on the 8-bit luminance scale used by SR benchmarks."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import PlanarImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def quantize(img) -> np.ndarray:
    """Scale [0, 1] data to [0, 255] and round half up, as an 8-bit cast would."""
    data = img.data if isinstance(img, PlanarImage) else np.asarray(img)
    if data.ndim != 2:
        raise ValueError(f"metrics expect a single-channel image, got shape {data.shape}")
    return np.floor(np.clip(data.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5)


def _pair(a, b):
    qa, qb = quantize(a), quantize(b)
    if qa.shape != qb.shape:
        raise ValueError(f"image sizes differ: {qa.shape} vs {qb.shape}")
    return qa, qb


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical quantized images."""
    qa, qb = _pair(a, b)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; its outer product is the 2-D SSIM window."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def ssim_map(a, b) -> np.ndarray:
    qa, qb = _pair(a, b)
    if min(qa.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {qa.shape}")
    g = gaussian_window()
    mu1 = _filter_valid(qa, g)
    mu2 = _filter_valid(qb, g)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = _filter_valid(qa * qa, g) - mu1_sq
    sigma2_sq = _filter_valid(qb * qb, g) - mu2_sq
    sigma12 = _filter_valid(qa * qb, g) - mu1_mu2
    num = (2 * mu1_mu2 + SSIM_C1) * (2 * sigma12 + SSIM_C2)
    den = (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over valid (unpadded) 11x11 Gaussian windows."""
    return float(np.mean(ssim_map(a, b)))
