"""Full-reference image quality metrics and rank statistics.

PSNR and MS-SSIM operate on C x H x W float tensors in [0, peak]. MS-SSIM uses
the standard reference parameterization: 11-tap Gaussian window (sigma 1.5),
K1=0.01, K2=0.03, scale weights (0.0448, 0.2856, 0.3001, 0.2363, 0.1333),
computed per channel and averaged. Images too small for the full five scales
drop coarsest scales and renormalize the remaining weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.signal import convolve2d

from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class ImageTensor:
    """C x H x W float image with an explicit dynamic range peak."""

    data: np.ndarray
    peak: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError("image tensor must be C x H x W")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValidationError("image must have positive spatial size")
        if self.peak <= 0:
            raise ValidationError("peak must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("non-finite pixel values")


@dataclass
class TauResult:
    tau: float
    p_value: float
    n: int


def _check_pair(a: ImageTensor, b: ImageTensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValidationError(
            f"shape mismatch: {a.data.shape} vs {b.data.shape}"
        )
    if a.peak != b.peak:
        raise ValidationError("peak mismatch between images")


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """10*log10(peak^2 / MSE); +inf when the images are identical."""
    _check_pair(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(a.peak * a.peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _ssim_terms(x: np.ndarray, y: np.ndarray, peak: float) -> tuple[float, float]:
    """Mean luminance term and mean contrast-structure term for one channel."""
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = convolve2d(x, _WINDOW, mode="valid")
    mu_y = convolve2d(y, _WINDOW, mode="valid")
    xx = convolve2d(x * x, _WINDOW, mode="valid") - mu_x * mu_x
    yy = convolve2d(y * y, _WINDOW, mode="valid") - mu_y * mu_y
    xy = convolve2d(x * y, _WINDOW, mode="valid") - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * xy + c2) / (xx + yy + c2)
    return float(lum.mean()), float(cs.mean())


def _downsample(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling, cropping any odd remainder."""
    h, w = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]) / 4.0


def _num_scales(h: int, w: int) -> int:
    scales = 0
    size = min(h, w)
    while size >= SSIM_WINDOW and scales < len(MSSSIM_WEIGHTS):
        scales += 1
        size //= 2
    return scales


def ms_ssim(a: ImageTensor, b: ImageTensor) -> float:
    """Multi-scale SSIM, per channel then averaged; always <= 1 and exactly 1
    on identical inputs."""
    _check_pair(a, b)
    _, h, w = a.data.shape
    scales = _num_scales(h, w)
    if scales < 1:
        raise ValidationError(
            f"image {h}x{w} too small for an {SSIM_WINDOW}-tap SSIM window"
        )
    weights = np.asarray(MSSSIM_WEIGHTS[:scales], dtype=np.float64)
    weights /= weights.sum()

    per_channel = []
    for c in range(a.data.shape[0]):
        x = a.data[c].astype(np.float64)
        y = b.data[c].astype(np.float64)
        value = 1.0
        for s in range(scales):
            lum, cs = _ssim_terms(x, y, a.peak)
            # Negative structure terms cannot carry fractional weights; the
            # clamp also enforces the <= 1 bound against roundoff.
            cs = min(max(cs, 0.0), 1.0)
            if s == scales - 1:
                lum = min(max(lum, 0.0), 1.0)
                value *= (lum * cs) ** weights[s] if lum * cs > 0 else 0.0
            else:
                value *= cs ** weights[s] if cs > 0 else 0.0
                x = _downsample(x)
                y = _downsample(y)
        per_channel.append(value)
    return float(np.mean(per_channel))


def kendall_tau(x, y) -> TauResult:
    """Kendall's tau-b with tie correction; p-value from the tie-adjusted
    normal approximation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("score vectors must be 1-D and equal length")
    if x.size < 2:
        raise ValidationError("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValidationError("tau undefined for an all-tied vector")
    res = stats.kendalltau(x, y, method="asymptotic")
    return TauResult(tau=float(res.statistic), p_value=float(res.pvalue), n=x.size)


def top_k_overlap(scores_a, scores_b, k: int) -> float:
    """|top_k(a) & top_k(b)| / k over a shared index set; ties broken by
    ascending index."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("score vectors must be 1-D and equal length")
    if k <= 0:
        raise ValidationError("k must be positive")
    if k > a.size:
        raise ValidationError(f"k={k} exceeds n={a.size}")
    idx = np.arange(a.size)
    top_a = set(idx[np.lexsort((idx, -a))][:k].tolist())
    top_b = set(idx[np.lexsort((idx, -b))][:k].tolist())
    return len(top_a & top_b) / k


def batch_metrics(outputs: np.ndarray, targets: np.ndarray, peak: float = 1.0):
    """Compute psnr and ms_ssim column-wise for aligned image batches
    (n, C, H, W). Returns {metric: (n,) float64}."""
    outputs = np.asarray(outputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if outputs.shape != targets.shape or outputs.ndim != 4:
        raise ValidationError("batches must be aligned (n, C, H, W) tensors")
    n = outputs.shape[0]
    psnr_col = np.empty(n, dtype=np.float64)
    ssim_col = np.empty(n, dtype=np.float64)
    for i in range(n):
        a = ImageTensor(outputs[i], peak)
        b = ImageTensor(targets[i], peak)
        psnr_col[i] = psnr(a, b)
        ssim_col[i] = ms_ssim(a, b)
    return {"psnr": psnr_col, "ms_ssim": ssim_col}
