"""PSNR and SSIM on the 0..255 scale, plus the Y-channel conversion and
border cropping used by the evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "MetricReport",
    "rgb_to_y",
    "crop_border",
    "psnr",
    "ssim",
    "gaussian_window",
    "SSIM_WINDOW",
    "SSIM_SIGMA",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0


@dataclass
class MetricReport:
    """One evaluated image pair; psnr_db is math.inf for identical crops."""

    image: str
    task: str
    psnr_db: float
    ssim: float

    def csv_line(self) -> str:
        return f"{self.image},{self.task},{self.psnr_db:.6f},{self.ssim:.6f}"


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing luma of an [H, W, 3] array on the 0..255 scale.

    Y = 16 + (65.481 R + 128.553 G + 24.966 B) / 255, the BT.601 convention
    used when metrics are reported on the Y channel only.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"rgb_to_y needs [H, W, 3], got {arr.shape}")
    r, g, b = arr[:, :, 0], arr[:, :, 1], arr[:, :, 2]
    return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def crop_border(img: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return img
    if 2 * border >= min(img.shape[0], img.shape[1]):
        raise ShapeError(f"border {border} leaves no pixels of {img.shape}")
    return img[border:-border, border:-border]


def psnr(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    """Peak signal-to-noise ratio in dB between 0..255-scale arrays.

    ``border`` pixels are cropped from every side first. Identical crops
    return math.inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    a = crop_border(a, border)
    b = crop_border(b, border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weighting window."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    one_d = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(one_d, one_d)
    return win / win.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Correlate with the window, keeping only fully-covered positions."""
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", view, win, optimize=True)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM of two grayscale 0..255-scale arrays.

    Uses the standard 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
    K2 = 0.03, L = 255, averaged over valid (fully-covered) positions
    only, so no padding convention is involved.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"ssim needs grayscale [H, W], got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs extents >= {SSIM_WINDOW}, got {a.shape}")
    win = gaussian_window()
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
