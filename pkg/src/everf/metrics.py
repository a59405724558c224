"""Image-quality and uncertainty-quality metrics.

AUSE convention (the literature leaves details open, so they are pinned
here): pixels are removed in 1% steps by descending uncertainty, the error
of the retained set is recomputed at each step, both the uncertainty-
sorted curve and the oracle curve (sorted by true error) are normalized by
the full-set error, and the area of the gap between them is integrated
with the trapezoid rule over the removal fractions.  Ties break by stable
pixel index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from . import evidential as ev

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; +inf when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def cap_psnr(value: float) -> float:
    """Sentinel used when writing CSVs: +inf (identical images) caps at 99."""
    return min(value, PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, gt: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over 11x11 Gaussian windows (sigma 1.5) on luminance."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    x = pred.mean(axis=-1) if pred.ndim == 3 else pred
    y = gt.mean(axis=-1) if gt.ndim == 3 else gt
    kernel = _gaussian_kernel()
    half = kernel.shape[0] // 2

    def win(img):
        return correlate(img, kernel, mode="constant")[half:-half, half:-half]

    mu_x, mu_y = win(x), win(y)
    xx, yy, xy = win(x * x), win(y * y), win(x * y)
    var_x = xx - mu_x ** 2
    var_y = yy - mu_y ** 2
    cov = xy - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def nll_metric(gt_image: np.ndarray, gamma: np.ndarray, nu: np.ndarray,
               alpha: np.ndarray, beta: np.ndarray) -> float:
    """Mean over pixels of the channel-summed evidential NLL."""
    gt = np.asarray(gt_image, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gamma, dtype=np.float64).reshape(-1, 3)
    nu = np.asarray(nu, dtype=np.float64).reshape(-1, 1)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1, 1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1, 1)
    terms = ev.nll_terms(gt, g, nu, alpha, beta)
    return float(np.mean(np.sum(terms, axis=1)))


def per_pixel_error(pred: np.ndarray, gt: np.ndarray, kind: str) -> np.ndarray:
    """Per-pixel RMSE or MAE over channels, flattened."""
    diff = (np.asarray(pred, dtype=np.float64)
            - np.asarray(gt, dtype=np.float64)).reshape(-1, 3)
    if kind == "rmse":
        return np.sqrt(np.mean(diff ** 2, axis=1))
    if kind == "mae":
        return np.mean(np.abs(diff), axis=1)
    raise ValueError("kind must be 'rmse' or 'mae'")


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    errors: np.ndarray
    normalized: bool


def _retained_error(errors_sorted: np.ndarray, fractions: np.ndarray,
                    kind: str) -> np.ndarray:
    """Retained-set error after removing the first floor(f*n) entries."""
    n = errors_sorted.size
    out = np.empty(fractions.size)
    sq = errors_sorted ** 2
    for i, f in enumerate(fractions):
        k = int(math.floor(f * n))
        kept = errors_sorted[k:]
        if kept.size == 0:
            out[i] = 0.0
        elif kind == "rmse":
            out[i] = math.sqrt(float(np.mean(sq[k:])))
        else:
            out[i] = float(np.mean(kept))
    return out


def sparsification_curve(uncertainty: np.ndarray, error: np.ndarray,
                         kind: str = "rmse",
                         fractions: np.ndarray | None = None,
                         normalize: bool = True) -> SparsificationCurve:
    """Retained error as the most-uncertain pixels are removed."""
    u = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    e = np.asarray(error, dtype=np.float64).reshape(-1)
    if u.shape != e.shape:
        raise ValueError("uncertainty and error must have the same length")
    if fractions is None:
        fractions = np.arange(0.0, 1.0, 0.01)
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(np.diff(fractions) <= 0) or fractions[0] < 0 or fractions[-1] >= 1:
        raise ValueError("fractions must be increasing within [0, 1)")
    order = np.argsort(-u, kind="stable")
    errs = _retained_error(e[order], fractions, kind)
    full = errs[0]
    if normalize:
        errs = errs / full if full > 0 else np.zeros_like(errs)
    return SparsificationCurve(fractions, errs, normalize)


def ause(uncertainty: np.ndarray, error: np.ndarray, kind: str = "rmse",
         fractions: np.ndarray | None = None) -> float:
    """Area between the uncertainty-sorted and oracle sparsification curves.

    Zero iff the uncertainty ranking matches the error ranking; only ranks
    matter, so any strictly monotone transform of the uncertainties leaves
    the value unchanged.
    """
    curve = sparsification_curve(uncertainty, error, kind, fractions)
    oracle = sparsification_curve(error, error, kind, fractions)
    gap = np.maximum(curve.errors - oracle.errors, 0.0)
    return float(np.trapz(gap, curve.fractions))
