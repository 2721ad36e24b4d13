"""Image fidelity metrics on linear RGB in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

__all__ = ["psnr", "ssim", "MetricsReport"]

PSNR_CAP = 99.0


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image size mismatch: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(img: np.ndarray, ref: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with the standard 11x11, sigma 1.5 window.

    Window statistics use valid convolution (5-pixel border cropped), data
    range 1.  Multichannel images average the per-channel maps.
    """
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image size mismatch: {img.shape} vs {ref.shape}")
    if img.ndim == 2:
        img, ref = img[..., None], ref[..., None]
    kernel = _gaussian_kernel()
    c1, c2 = k1**2, k2**2
    vals = []
    for ch in range(img.shape[2]):
        x, y = img[..., ch], ref[..., ch]
        mx = convolve2d(x, kernel, mode="valid")
        my = convolve2d(y, kernel, mode="valid")
        mxx = convolve2d(x * x, kernel, mode="valid") - mx * mx
        myy = convolve2d(y * y, kernel, mode="valid") - my * my
        mxy = convolve2d(x * y, kernel, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * mxy + c2)
        den = (mx * mx + my * my + c1) * (mxx + myy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    per_image_psnr: list = field(default_factory=list)
    per_image_ssim: list = field(default_factory=list)
    runtime_s: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_image_psnr)) if self.per_image_psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_image_ssim)) if self.per_image_ssim else float("nan")

    def as_dict(self) -> dict:
        return {
            "psnr": self.per_image_psnr,
            "ssim": self.per_image_ssim,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "runtime_s": self.runtime_s,
        }
