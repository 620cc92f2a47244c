"""Image-quality metrics: PSNR, single-scale SSIM, and grayscale entropy."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .tensor import ShapeError

PSNR_CAP_DB = 100.0
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_WINDOW = 11


def _check_pair(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> np.ndarray:
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    mu_x = convolve2d(x, window, mode="valid")
    mu_y = convolve2d(y, window, mode="valid")
    xx = convolve2d(x * x, window, mode="valid") - mu_x * mu_x
    yy = convolve2d(y * y, window, mode="valid") - mu_y * mu_y
    xy = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows, per channel."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ShapeError(f"ssim wants (H, W) or (H, W, C) images, got {a.shape}")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} smaller than the {_SSIM_WINDOW}x"
                         f"{_SSIM_WINDOW} window")
    window = _gaussian_window()
    maps = [_ssim_channel(a[..., c], b[..., c], window) for c in range(a.shape[2])]
    return float(np.mean(maps))


def to_gray(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an (H, W, 3) image; (H, W) passes through."""
    img = np.asarray(img, np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    raise ShapeError(f"expected (H, W) or (H, W, 3), got {img.shape}")


def entropy(img) -> float:
    """Shannon entropy in bits of the 256-bin quantized grayscale histogram."""
    gray = to_gray(img)
    levels = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.int64)
    counts = np.bincount(levels.ravel(), minlength=256)
    p = counts[counts > 0] / levels.size
    return float(-(p * np.log2(p)).sum())
