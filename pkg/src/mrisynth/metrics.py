"""Image quality metrics and the paired significance test used in reports.

All metrics operate on single-channel 2-D arrays with a fixed data range
(2.0 for the [-1, 1] intensity contract). The signed-rank test is
self-contained: the exact route enumerates the sign-flip distribution with a
subset-sum table over doubled mid-ranks (so ties are handled), the
approximate route uses the matching normal model with continuity correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .errors import InsufficientDataError, ParameterError

PSNR_CAP = 100.0  # returned for bit-identical images (MSE = 0)


def _as_image_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return the 100 dB cap."""
    if data_range <= 0:
        raise ParameterError(f"data_range must be positive, got {data_range}")
    a, b = _as_image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def masked_psnr(a, b, mask, data_range: float = 2.0) -> float:
    """PSNR restricted to the pixels selected by a boolean mask."""
    if data_range <= 0:
        raise ParameterError(f"data_range must be positive, got {data_range}")
    a, b = _as_image_pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ParameterError(f"mask shape {mask.shape} != image shape {a.shape}")
    if not mask.any():
        raise ParameterError("mask selects no pixels")
    diff = a[mask] - b[mask]
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


@dataclass
class SSIMParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 2.0

    def __post_init__(self) -> None:
        if self.window_size % 2 != 1 or self.window_size < 3:
            raise ParameterError("window_size must be an odd integer >= 3")
        if self.sigma <= 0 or self.data_range <= 0:
            raise ParameterError("sigma and data_range must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian tap matrix."""
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a, b, params: SSIMParams | None = None) -> float:
    """Mean structural similarity over valid (fully inside) windows."""
    params = params or SSIMParams()
    a, b = _as_image_pair(a, b)
    if a.ndim != 2:
        raise ParameterError(f"ssim expects 2-D images, got shape {a.shape}")
    k = params.window_size
    if min(a.shape) < k:
        raise ParameterError(
            f"image {a.shape} smaller than the {k}x{k} comparison window"
        )
    win = gaussian_window(k, params.sigma)
    wa = sliding_window_view(a, (k, k))
    wb = sliding_window_view(b, (k, k))
    mu_a = np.tensordot(wa, win, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, win, axes=([2, 3], [0, 1]))
    ea = np.tensordot(wa * wa, win, axes=([2, 3], [0, 1]))
    eb = np.tensordot(wb * wb, win, axes=([2, 3], [0, 1]))
    eab = np.tensordot(wa * wb, win, axes=([2, 3], [0, 1]))
    var_a = ea - mu_a * mu_a
    var_b = eb - mu_b * mu_b
    cov = eab - mu_a * mu_b
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class WilcoxonResult:
    statistic: float  # W+: sum of ranks of positive differences
    p_value: float  # two-sided
    n: int  # non-zero differences actually used
    mode: str  # "exact" or "approx"


def _exact_two_sided_p(scaled_ranks: np.ndarray, scaled_w: int) -> float:
    """P(W+ at least as extreme as observed) by subset-sum enumeration.

    Ranks arrive doubled so mid-ranks become integers; counts stay well below
    2^53, so float64 tallies are exact.
    """
    total = int(scaled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in scaled_ranks:
        r = int(r)
        counts[r:] += counts[: counts.size - r].copy()
    lo = min(scaled_w, total - scaled_w)
    hi = max(scaled_w, total - scaled_w)
    if lo == hi:
        return 1.0
    mass = counts[: lo + 1].sum() + counts[hi:].sum()
    return min(1.0, float(mass / counts.sum()))


def wilcoxon_signed_rank(
    x,
    y,
    mode: str = "auto",
    min_n: int = 6,
    exact_threshold: int = 25,
) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test for paired samples.

    Zero differences are dropped; ties in |difference| get average mid-ranks
    on both routes. ``mode`` forces the exact enumeration or the normal
    approximation; ``auto`` picks exact up to ``exact_threshold`` effective
    pairs.
    """
    if mode not in ("auto", "exact", "approx"):
        raise ParameterError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ParameterError(f"paired samples differ in length: {x.size} vs {y.size}")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n < min_n:
        raise InsufficientDataError(
            f"only {n} non-zero differences; need at least {min_n}"
        )
    ranks = rankdata(np.abs(d))  # mid-ranks for ties
    w_plus = float(ranks[d > 0].sum())
    if mode == "auto":
        mode = "exact" if n <= exact_threshold else "approx"

    if mode == "exact":
        scaled = np.rint(ranks * 2).astype(np.int64)
        p = _exact_two_sided_p(scaled, int(round(w_plus * 2)))
    else:
        mean = float(ranks.sum()) / 2.0
        sigma = math.sqrt(float((ranks**2).sum()) / 4.0)
        if sigma == 0.0:
            p = 1.0
        else:
            delta = w_plus - mean
            # continuity correction pulls the statistic half a step toward the mean
            z = (delta - 0.5 * np.sign(delta)) / sigma
            p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(statistic=w_plus, p_value=p, n=n, mode=mode)
