"""Image-quality metrics (PSNR, windowed SSIM) and the generalization
report (training/testing error plus parameter count)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class MetricConfig:
    """SSIM constants and window specification.

    ``data_range`` is the dynamic range L; the stabilizers are
    C1 = (k1 L)^2 and C2 = (k2 L)^2.
    """

    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    window_size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if self.data_range <= 0 or self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("data_range, k1 and k2 must all be positive")


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio 10*log10(L^2 / MSE) in decibels.

    Identical inputs return positive infinity.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian weighting window."""
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x: np.ndarray, y: np.ndarray, config: MetricConfig = MetricConfig()) -> float:
    """Mean structural similarity over sliding Gaussian windows.

    The local index is the product of luminance and contrast/structure
    terms; the mean is taken over all window positions fully inside the
    image.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    c1 = (config.k1 * config.data_range) ** 2
    c2 = (config.k2 * config.data_range) ** 2
    w = gaussian_window(config.window_size, config.sigma)

    def filt(img):
        return ndimage.convolve(img, w, mode="constant")

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    index = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    r = config.window_size // 2
    interior = index[r : index.shape[0] - r, r : index.shape[1] - r]
    return float(interior.mean())


def normalized_magnitude(x: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude images scaled by the reference maximum (fixed convention
    for all reported metrics)."""
    ref_mag = np.abs(reference)
    scale = ref_mag.max() + 1e-12
    return np.abs(x) / scale, ref_mag / scale


@dataclass
class GenReport:
    """Training error, testing error, parameter count and sample count."""

    train_error: float
    test_error: float | None
    parameter_count: int
    train_samples: int

    def __post_init__(self):
        if self.parameter_count <= 0:
            raise ValueError("parameter count must be positive")


def gen_report(model, train_samples, test_samples) -> GenReport:
    """Mean reconstruction l2 errors plus the exact parameter count.

    ``test_error`` is None when the test set is empty.
    """
    from .federation import dataset_loss  # local import to avoid a cycle

    train_err = dataset_loss(model, train_samples)
    test_err = dataset_loss(model, test_samples) if test_samples else None
    return GenReport(
        train_error=train_err,
        test_error=test_err,
        parameter_count=model.parameter_count(),
        train_samples=len(train_samples),
    )
