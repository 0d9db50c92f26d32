"""PSNR and SSIM, with the SSIM gradient used by the image loss."""

from __future__ import annotations

import logging

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

C1 = 0.01**2
C2 = 0.03**2
WINDOW = 11
SIGMA = 1.5

PSNR_INF = float("inf")


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_KERNEL = gaussian_window()


def _conv(x: np.ndarray) -> np.ndarray:
    # separable, zero padded; symmetric kernel, so self-adjoint
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    return correlate1d(y, _KERNEL, axis=1, mode="constant")


def _window_mass(shape) -> np.ndarray:
    return _conv(np.ones(shape))


def _blur(x: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local mean over the in-image part of the window."""
    return _conv(x) / _window_mass(x.shape)


def _blur_adjoint(g: np.ndarray) -> np.ndarray:
    return _conv(g / _window_mass(g.shape))


def luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img.mean(axis=2) if img.ndim == 3 else img


def _check_pair(a, b):
    a = np.asarray(getattr(a, "rgb", a), dtype=float)
    b = np.asarray(getattr(b, "rgb", b), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim_map(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Per-pixel SSIM of two single-channel images plus intermediates for backward."""
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * sxy + C2
    B1 = mx * mx + my * my + C1
    B2 = sxx + syy + C2
    return (A1 * A2) / (B1 * B2), (mx, my, A1, A2, B1, B2)


def ssim_grad(x: np.ndarray, y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """d/dx of sum(weights * ssim_map(x, y)).

    Written through the ratios A1/B1, A2/B2 and S so that every term cancels
    exactly, not just to rounding, when x == y.
    """
    S, (mx, my, A1, A2, B1, B2) = ssim_map(x, y)
    g = weights
    dS_dmx = (2.0 / B1) * (my * (A2 / B2) - S * mx)
    dS_dsxx = -S / B2
    dS_dsxy = 2.0 * (A1 / B1) / B2
    # sxx = blur(x^2) - mx^2 ; sxy = blur(xy) - mx my
    d_mx_total = dS_dmx + dS_dsxx * (-2 * mx) + dS_dsxy * (-my)
    return _blur_adjoint(g * d_mx_total) + 2 * x * _blur_adjoint(g * dS_dsxx) + y * _blur_adjoint(g * dS_dsxy)


def _valid(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match image {shape[:2]}")
    return mask


def psnr(rendered, target, mask=None) -> float:
    """-10 log10(MSE) over valid pixels; +inf for identical inputs."""
    a, b = _check_pair(rendered, target)
    m = _valid(mask, a.shape)
    if not m.any():
        raise ValueError("empty mask")
    mse = float(((a - b) ** 2)[m].mean())
    if mse == 0.0:
        return PSNR_INF
    return -10.0 * np.log10(mse)


def ssim(rendered, target, mask=None) -> float:
    """Mean SSIM of the luma images over valid pixels."""
    a, b = _check_pair(rendered, target)
    m = _valid(mask, a.shape)
    if not m.any():
        raise ValueError("empty mask")
    s, _ = ssim_map(luma(a), luma(b))
    return float(s[m].mean())
