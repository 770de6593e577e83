"""Image quality metrics for [0, 1] images."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

# Rec. 601 luma
LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE); identical images give ``math.inf``."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, *, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows of the luma images."""
    a, b = _check(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < size:
        raise MetricError(f"images smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    half = size // 2

    def blur(img):
        out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return out[half : img.shape[0] - half, half : img.shape[1] - half]

    c1, c2 = k1**2, k2**2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())
