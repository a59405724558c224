"""Deterministic and Gaussian comparison heads.

Both baselines reuse the field trunk and the rendering weights; they only
read different heads and use different losses.  The Gaussian head treats
the aleatoric output as the per-point color variance and composites it
with squared weights, so it captures data noise but no model ignorance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import EPS_UNCERTAINTY

_LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass
class NormalPixel:
    mu: np.ndarray        # (3,)
    sigma_sq: float       # shared across channels, >= floor


def normal_composite(weights, point_means, point_vars):
    """mu = sum(w_i mu_i), sigma^2 = sum(w_i^2 sigma_i^2).

    Accepts a single ray ((n,) weights with (n,) or (n, 3) means) and
    returns a :class:`NormalPixel`; batch callers use the training path
    in :mod:`everf.train` instead.
    """
    w = np.asarray(weights, dtype=np.float64)
    means = np.asarray(point_means, dtype=np.float64)
    pvars = np.asarray(point_vars, dtype=np.float64)
    if np.any(pvars <= 0):
        raise ValueError("point variances must be positive")
    if means.ndim == 1:
        means = means[:, None]
    mu = w @ means
    sigma_sq = float((w * w) @ pvars)
    return NormalPixel(mu=mu if mu.size > 1 else mu[0],
                       sigma_sq=max(sigma_sq, EPS_UNCERTAINTY))


def gaussian_nll_terms(c, mu, sigma_sq):
    """Per-channel Gaussian NLL, polymorphic over arrays/Tensors."""
    return 0.5 * (_LOG_TWO_PI + ad.log(sigma_sq)
                  + ad.square(c - mu) / sigma_sq)


def gaussian_nll(c_gt, pixel: NormalPixel) -> float:
    """Channel-summed Gaussian NLL of the ground truth."""
    if pixel.sigma_sq < EPS_UNCERTAINTY:
        raise ValueError("pixel variance below floor")
    c = np.asarray(c_gt, dtype=np.float64).reshape(-1)
    mu = np.broadcast_to(np.asarray(pixel.mu, dtype=np.float64).reshape(-1), c.shape)
    return float(np.sum(gaussian_nll_terms(c, mu, pixel.sigma_sq)))


def mse(pred, gt) -> float:
    """Mean squared error over all pixels and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return float(np.mean((pred - gt) ** 2))
