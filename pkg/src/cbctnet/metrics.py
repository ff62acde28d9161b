"""Image-quality metrics and the paired Wilcoxon signed-rank test.

SSIM follows the standard windowed formulation: 11x11 Gaussian window
(sigma 1.5), K1 = 0.01, K2 = 0.03, computed on valid windows only
(no padding). PSNR and SSIM use a fixed data range of 3000 HU so scores
are comparable across volumes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DATA_RANGE_HU = 3000.0
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"rmse shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE_HU) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    e = rmse(a, b)
    if e == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range / e)


def _gaussian_window() -> np.ndarray:
    half = (_WINDOW_SIZE - 1) / 2.0
    x = np.arange(_WINDOW_SIZE) - half
    g = np.exp(-(x * x) / (2.0 * _WINDOW_SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gaussian_window()


def _local_mean(img: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, (_WINDOW_SIZE, _WINDOW_SIZE))
    return np.tensordot(view, _WINDOW, axes=([2, 3], [0, 1]))


def ssim2d(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE_HU) -> float:
    """Mean structural similarity of two 2D slices over valid windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"ssim2d expects 2D slices, got rank {a.ndim}")
    if a.shape[0] < _WINDOW_SIZE or a.shape[1] < _WINDOW_SIZE:
        raise ValueError(f"slice {a.shape} smaller than the {_WINDOW_SIZE}x{_WINDOW_SIZE} ssim window")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_a = _local_mean(a)
    mu_b = _local_mean(b)
    var_a = _local_mean(a * a) - mu_a * mu_a
    var_b = _local_mean(b * b) - mu_b * mu_b
    cov = _local_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class SliceMetrics:
    index: int
    ssim: float
    psnr_db: float
    rmse_hu: float


def volume_slice_metrics(recon: np.ndarray, reference: np.ndarray,
                         data_range: float = DATA_RANGE_HU) -> list[SliceMetrics]:
    """Per-axial-slice (z) metrics of a reconstruction against ground truth."""
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if recon.shape != reference.shape:
        raise ValueError(f"volume shape mismatch: {recon.shape} vs {reference.shape}")
    if recon.ndim != 3:
        raise ValueError(f"expected 3D volumes, got rank {recon.ndim}")
    out = []
    for i in range(recon.shape[0]):
        out.append(SliceMetrics(
            index=i,
            ssim=ssim2d(recon[i], reference[i], data_range),
            psnr_db=psnr(recon[i], reference[i], data_range),
            rmse_hu=rmse(recon[i], reference[i]),
        ))
    return out


def aggregate_finite(values: Sequence[float], what: str = "psnr") -> tuple[float, float, int]:
    """Mean/std over finite entries; warns when non-finite ones are dropped.

    Returns (mean, std, n_used). Perfect-reconstruction slices produce
    +inf PSNR, which cannot be averaged meaningfully.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    dropped = arr.size - finite.size
    if dropped:
        warnings.warn(f"{dropped} non-finite {what} value(s) excluded from aggregation")
    if finite.size == 0:
        return math.nan, math.nan, 0
    return float(finite.mean()), float(finite.std()), int(finite.size)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float        # W+: rank sum of positive differences
    p_value: float          # two-sided
    n: int                  # pairs with nonzero difference
    method: str             # "exact" or "approx"


_EXACT_LIMIT = 25


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         method: str = "auto") -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped; ties among the remaining absolute
    differences get mid-ranks. ``method="exact"`` enumerates the null
    distribution of the rank sum (via dynamic programming, exact also
    under mid-ranks); ``"approx"`` uses the normal approximation with
    tie-corrected variance and continuity correction. ``"auto"`` picks
    exact for up to 25 nonzero pairs.
    """
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(list(a), dtype=np.float64)
    b = np.asarray(list(b), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("wilcoxon_signed_rank expects two equal-length 1D sequences")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise ValueError(f"insufficient samples: need at least 5 nonzero differences, got {n}")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= _EXACT_LIMIT else "approx"

    if method == "exact":
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        total = int(doubled.sum())
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        top = 0
        for r in doubled:
            counts[r:top + r + 1] += counts[0:top + 1].copy()
            top += r
        w2 = int(round(2.0 * w_plus))
        denom = counts.sum()
        p_low = counts[:w2 + 1].sum() / denom
        p_high = counts[w2:].sum() / denom
        p = min(1.0, 2.0 * min(p_low, p_high))
        return WilcoxonResult(w_plus, p, n, "exact")

    mean_w = n * (n + 1) / 4.0
    var_w = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var_w -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var_w <= 0:
        return WilcoxonResult(w_plus, 1.0, n, "approx")
    num = w_plus - mean_w
    if num > 0:
        num -= 0.5
    elif num < 0:
        num += 0.5
    z = num / math.sqrt(var_w)
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(w_plus, p, n, "approx")
