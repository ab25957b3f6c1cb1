"""Image quality metrics: PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    method: str = ""
    task: str = ""
    seed: int = 0


def _as_array(img):
    values = getattr(img, "values", img)
    return np.asarray(values, dtype=np.float64)


def psnr(a, b, max_value=1.0):
    """10*log10(max^2/MSE); +inf for identical images."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ValueError(f"psnr: shape mismatch {av.shape} vs {bv.shape}")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def _gaussian_window(size, sigma):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _windowed_mean(img, w):
    half = len(w) // 2
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, max_value=1.0):
    """Mean local SSIM over a Gaussian window (valid positions only)."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ValueError(f"ssim: shape mismatch {av.shape} vs {bv.shape}")
    if min(av.shape) < window:
        raise ValueError(f"ssim: image smaller than {window}-tap window")
    w = _gaussian_window(window, sigma)
    mu_a = _windowed_mean(av, w)
    mu_b = _windowed_mean(bv, w)
    var_a = _windowed_mean(av * av, w) - mu_a**2
    var_b = _windowed_mean(bv * bv, w) - mu_b**2
    cov = _windowed_mean(av * bv, w) - mu_a * mu_b
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
