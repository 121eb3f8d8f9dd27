"""Image quality metrics on ``[C,H,W]`` or ``[B,C,H,W]`` arrays in [0, 1]."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def l1(generated: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(generated, np.float64) - np.asarray(target, np.float64))))


def psnr(generated: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(generated, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # valid-mode weighted window average over the last two axes
    win = sliding_window_view(img, window.shape, axis=(-2, -1))
    return np.einsum("...ijkl,kl->...ij", win, window)


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim needs equal shapes, got {x.shape} and {y.shape}")
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = gaussian_window()
    mx, my = _filter(x, w), _filter(y, w)
    vx = _filter(x * x, w) - mx * mx
    vy = _filter(y * y, w) - my * my
    cxy = _filter(x * y, w) - mx * my
    return ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))


def ssim(generated: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over valid window positions, averaged over channels (and batch)."""
    return float(ssim_map(generated, target).mean())


def metrics(generated: np.ndarray, target: np.ndarray) -> dict[str, float]:
    return {"l1": l1(generated, target), "psnr": psnr(generated, target), "ssim": ssim(generated, target)}
