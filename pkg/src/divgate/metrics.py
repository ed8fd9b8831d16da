"""PSNR and SSIM for [0,1] grayscale images.

SSIM follows the standard single-scale formulation: 11x11 Gaussian window
with sigma 1.5, K1=0.01, K2=0.03, data range L=1.0, and valid-region
windowing (no padding).  Both metrics are computed in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _image(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a single 2-D image, got shape {arr.shape}")
    return arr.astype(np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    """10 log10(max_val^2 / MSE); +inf when the images are identical."""
    if max_val <= 0:
        raise ValueError(f"max_val must be positive, got {max_val}")
    x, y = _image(a), _image(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(view, w, axes=([2, 3], [0, 1]))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean of the local SSIM map over all fully valid window positions."""
    x, y = _image(a), _image(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _window_means(x, w)
    mu_y = _window_means(y, w)
    var_x = _window_means(x * x, w) - mu_x**2
    var_y = _window_means(y * y, w) - mu_y**2
    cov = _window_means(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    n: int
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float
    ssim_values: list = field(default_factory=list, repr=False)
    psnr_values: list = field(default_factory=list, repr=False)
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, ssim_values, psnr_values, **extras) -> "MetricReport":
        sv = np.asarray(ssim_values, dtype=np.float64)
        pv = np.asarray(psnr_values, dtype=np.float64)
        if sv.size < 1:
            raise ValueError("need at least one sample")
        return cls(
            n=int(sv.size),
            ssim_mean=float(sv.mean()),
            ssim_std=float(sv.std()),
            psnr_mean=float(pv.mean()),
            psnr_std=float(pv.std()),
            ssim_values=list(map(float, sv)),
            psnr_values=list(map(float, pv)),
            extras=dict(extras),
        )

    def to_text(self) -> str:
        rows = [
            f"samples: {self.n}",
            f"ssim:    {self.ssim_mean:.4f} +/- {self.ssim_std:.4f}",
            f"psnr:    {self.psnr_mean:.2f} +/- {self.psnr_std:.2f} dB",
        ]
        for k, v in self.extras.items():
            rows.append(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
        return "\n".join(rows) + "\n"

    def to_csv(self) -> str:
        lines = ["index,ssim,psnr"]
        for i, (s, p) in enumerate(zip(self.ssim_values, self.psnr_values)):
            lines.append(f"{i},{s:.6f},{p:.6f}")
        return "\n".join(lines) + "\n"
