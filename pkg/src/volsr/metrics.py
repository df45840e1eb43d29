"""Full-reference volumetric quality metrics: SSIM, PSNR, feature distance.

SSIM is computed fully volumetrically with an 11^3 Gaussian window (sigma
1.5), not slice-averaged. The feature distance reuses the 2.5D perceptual
loss under a fixed extractor; it is a labeled stand-in, not LPIPS or FID.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .losses import perceptual_2_5d
from .models import FeatureExtractor2D
from .nn import Tensor, no_grad
from .volume import Volume

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

FEATURE_DISTANCE_NOTE = (
    "feature_distance uses a fixed random-weight extractor; it is not LPIPS or FID"
)


class MetricsError(ValueError):
    """Metric inputs violate a shape or range precondition."""


@dataclass(frozen=True)
class MetricsReport:
    """Quality figures for one (candidate, reference) pair.

    feature_distance is None when no extractor is supplied; when present it
    is the 2.5D feature-space distance, a stand-in that is not LPIPS/FID.
    """

    ssim: float
    psnr: float
    data_range: float
    feature_distance: float | None = None


EVAL_FIELDS = ("volume_id", "method", "ssim", "psnr", "feature_distance", "data_range")


def eval_row(volume_id: str, method: str, report: MetricsReport) -> list:
    """One evaluation CSV row, ordered as EVAL_FIELDS."""
    fd = "" if report.feature_distance is None else report.feature_distance
    return [volume_id, method, report.ssim, report.psnr, fd, report.data_range]


def _as_array(v) -> np.ndarray:
    data = v.data if isinstance(v, Volume) else v
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise MetricsError(f"expected a 3-D volume, got shape {arr.shape}")
    return arr


def _check_pair(x: np.ndarray, y: np.ndarray, data_range: float) -> None:
    if x.shape != y.shape:
        raise MetricsError(f"shape mismatch {x.shape} vs {y.shape}")
    if not data_range > 0:
        raise MetricsError(f"data_range must be > 0, got {data_range}")


def _gaussian_kernel1d() -> np.ndarray:
    half = SSIM_WINDOW // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


def _gaussian_filter(x: np.ndarray) -> np.ndarray:
    k = _gaussian_kernel1d()
    for axis in range(3):
        x = ndimage.correlate1d(x, k, axis=axis, mode="constant")
    return x


def ssim3d(a, b, data_range: float) -> float:
    """Mean structural similarity over all fully interior window positions."""
    x = _as_array(a)
    y = _as_array(b)
    _check_pair(x, y, data_range)
    if min(x.shape) < SSIM_WINDOW:
        raise MetricsError(
            f"volume shape {x.shape} cannot fit the {SSIM_WINDOW}^3 window"
        )
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _gaussian_filter(x)
    mu_y = _gaussian_filter(y)
    sxx = _gaussian_filter(x * x) - mu_x * mu_x
    syy = _gaussian_filter(y * y) - mu_y * mu_y
    sxy = _gaussian_filter(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    half = SSIM_WINDOW // 2
    interior = (slice(half, -half),) * 3
    return float((num[interior] / den[interior]).mean())


def psnr(a, b, data_range: float) -> float:
    """10 log10(data_range^2 / MSE) in dB; +inf for identical inputs."""
    x = _as_array(a)
    y = _as_array(b)
    _check_pair(x, y, data_range)
    diff = x - y
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def feature_distance(a, b, fx: FeatureExtractor2D) -> float:
    """2.5D feature-space distance with gradients disabled (not LPIPS/FID)."""
    x = _as_array(a)
    y = _as_array(b)
    if x.shape != y.shape:
        raise MetricsError(f"shape mismatch {x.shape} vs {y.shape}")
    with no_grad():
        ta = Tensor(x[None, None])
        tb = Tensor(y[None, None])
        return float(perceptual_2_5d(ta, tb, fx).item())


def default_data_range(reference) -> float:
    """max - min of the reference volume, the default PSNR/SSIM range."""
    arr = _as_array(reference)
    return float(arr.max() - arr.min())


def evaluate_pair(
    candidate, reference, data_range: float | None = None, fx: FeatureExtractor2D | None = None
) -> MetricsReport:
    """SSIM + PSNR (and feature distance when an extractor is given)."""
    if data_range is None:
        data_range = default_data_range(reference)
    fd = None if fx is None else feature_distance(candidate, reference, fx)
    return MetricsReport(
        ssim=ssim3d(candidate, reference, data_range),
        psnr=psnr(candidate, reference, data_range),
        data_range=float(data_range),
        feature_distance=fd,
    )
