"""Ray sampling, rendering weights, and point-to-pixel compositing.

The pixel mean color is the transmittance-weighted sum of point colors;
the aleatoric/epistemic variances propagate with squared weights.  The
pixel-level evidential parameters (gamma, nu, alpha, beta) are assembled
from the composited quantities:

    gamma = mean color          nu    = AU / EU
    alpha = 1 + sum(w~_i a_i)   beta  = AU * (alpha - 1)

with w~ the weights normalized to sum one and a_i the point shape scores.
Since every shape score is positive and the normalized weights sum to one,
alpha > 1 holds structurally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import EPS_UNCERTAINTY, EPS_WEIGHT, EU_EMPTY_RAY
from .field import (FieldParams, PointBatch, PointPrediction, evaluate_points,
                    positional_encode)


@dataclass
class Ray:
    origin: np.ndarray      # (3,)
    direction: np.ndarray   # (3,) unit
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be a unit vector")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")


@dataclass
class RaySamples:
    depths: np.ndarray       # (n,) strictly increasing
    intervals: np.ndarray    # (n,) positive
    weights: np.ndarray | None = None
    normalized_weights: np.ndarray | None = None


@dataclass
class PixelEvidential:
    """Composited pixel quantities; uncertainties are shared across RGB."""

    mean_color: np.ndarray  # (3,)
    u: float
    u_alea: float
    u_epis: float
    gamma: np.ndarray       # (3,) == mean_color
    nu: float
    alpha: float
    beta: float
    opacity: float
    fallback: bool = False


@dataclass
class PixelBatch:
    """Array-valued (or Tensor-valued, during training) pixel quantities."""

    gamma: object    # (r, 3)
    au: object       # (r,)
    eu: object       # (r,)
    u: object        # (r,)
    nu: object       # (r,)
    alpha: object    # (r,)
    beta: object     # (r,)
    opacity: object  # (r,)
    fallback: np.ndarray  # (r,) bool


def sample_stratified(ray: Ray, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per equal-width bin of [t_near, t_far]."""
    if n < 1:
        raise ValueError("need at least one sample")
    width = (ray.t_far - ray.t_near) / n
    return ray.t_near + (np.arange(n) + rng.random(n)) * width


def sample_stratified_batch(t_near, t_far, n: int,
                            rng: np.random.Generator | None,
                            n_rays: int) -> np.ndarray:
    """(n_rays, n) depths; midpoint rule when rng is None (deterministic)."""
    if n < 1:
        raise ValueError("need at least one sample")
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_rays,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_rays,))
    width = (t_far - t_near) / n
    if rng is None:
        u = np.full((n_rays, n), 0.5)
    else:
        u = rng.random((n_rays, n))
    return t_near[:, None] + (np.arange(n)[None, :] + u) * width[:, None]


def intervals_from_depths(depths: np.ndarray, t_far) -> np.ndarray:
    """delta_i = t_{i+1} - t_i; the last interval runs to the far plane."""
    depths = np.asarray(depths, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    out = np.empty_like(depths)
    out[..., :-1] = np.diff(depths, axis=-1)
    out[..., -1] = t_far - depths[..., -1]
    if np.any(out <= 0):
        raise ValueError("depths must be strictly increasing and below t_far")
    return out


def compute_weights(densities, intervals):
    """w_i = exp(-sum_{j<i} rho_j d_j) * (1 - exp(-rho_i d_i)).

    Works on (n,) or (r, n); densities may be a tape Tensor.
    """
    dv = ad.value(densities)
    if np.any(dv < 0):
        raise ValueError("negative density")
    tau = densities * np.asarray(intervals, dtype=np.float64)
    trans = ad.exp(-ad.exclusive_cumsum(tau, axis=-1))
    absorb = 1.0 - ad.exp(-tau)
    return trans * absorb


def composite_batch(weights, points: PointBatch, background=None) -> PixelBatch:
    """Composite per-point predictions into pixel-level evidential values.

    ``weights`` is (r, n); point fields are (r, n) / (r, n, 3).  The
    background color (if any) receives the leftover transmittance in the
    mean color; it contributes no uncertainty.  Rays whose weights sum
    below the floor are flagged; in the eager (ndarray) path the fallback
    values are substituted in place, in the tape path the caller is
    expected to mask those rays out of the loss.
    """
    wv = ad.value(weights)
    r, n = wv.shape
    wsum = ad.asum(weights, axis=1)
    opacity = ad.value(wsum)
    fallback = opacity < EPS_WEIGHT
    wsafe = ad.maximum(wsum, EPS_WEIGHT)

    w2 = ad.square(weights)
    au = ad.asum(w2 * points.au, axis=1)
    eu = ad.asum(w2 * points.eu, axis=1)
    wn = weights / ad.reshape(wsafe, (r, 1))
    alpha = 1.0 + ad.asum(wn * points.shape_score, axis=1)

    gamma = ad.asum(ad.reshape(weights, (r, n, 1)) * points.colors, axis=1)
    if background is not None:
        bg = np.asarray(background, dtype=np.float64)
        gamma = gamma + ad.reshape(1.0 - wsum, (r, 1)) * bg

    if isinstance(wv, np.ndarray) and not isinstance(weights, ad.Tensor):
        # Eager path: substitute the empty-ray fallback directly.
        if np.any(fallback):
            gamma = np.array(gamma, copy=True)
            au = np.array(au, copy=True)
            eu = np.array(eu, copy=True)
            alpha = np.array(alpha, copy=True)
            gamma[fallback] = bg if background is not None else 0.0
            au[fallback] = EPS_UNCERTAINTY
            eu[fallback] = EU_EMPTY_RAY
            alpha[fallback] = 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            nu = au / eu
            beta = au * (alpha - 1.0)
        u = au + eu
    else:
        nu = au / eu
        beta = au * (alpha - 1.0)
        u = au + eu

    return PixelBatch(gamma=gamma, au=au, eu=eu, u=u, nu=nu, alpha=alpha,
                      beta=beta, opacity=wsum, fallback=fallback)


def composite(weights: np.ndarray, points: list[PointPrediction],
              background=None) -> PixelEvidential:
    """Single-ray compositing over explicit per-point predictions."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(points) != weights.shape[0]:
        raise ValueError("weights and points must have matching length")
    for p in points:
        if not (p.au > 0 and p.eu > 0 and p.shape_score > 0 and p.density >= 0):
            raise ValueError("point prediction violates positivity invariants")
    batch = PointBatch(
        colors=np.stack([np.broadcast_to(p.mean_color, (3,)) for p in points])[None],
        au=np.array([p.au for p in points])[None],
        eu=np.array([p.eu for p in points])[None],
        shape_score=np.array([p.shape_score for p in points])[None],
        density=np.array([p.density for p in points])[None],
    )
    px = composite_batch(weights[None, :], batch, background=background)
    return PixelEvidential(
        mean_color=px.gamma[0],
        u=float(px.u[0]),
        u_alea=float(px.au[0]),
        u_epis=float(px.eu[0]),
        gamma=px.gamma[0],
        nu=float(px.nu[0]),
        alpha=float(px.alpha[0]),
        beta=float(px.beta[0]),
        opacity=float(px.opacity[0]),
        fallback=bool(px.fallback[0]),
    )


def render_rays(params: FieldParams, origins: np.ndarray, dirs: np.ndarray,
                t_near, t_far, n_samples: int, background,
                rng: np.random.Generator | None = None,
                au_threshold: float | None = None,
                density_attenuation: float = 0.0,
                chunk: int = 8192) -> PixelBatch:
    """Eager (no-gradient) rendering of a batch of rays.

    ``au_threshold`` enables cleaning: samples whose aleatoric head exceeds
    the threshold have their density multiplied by ``density_attenuation``
    before the rendering weights are computed.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = origins.shape[0]
    out = []
    rays_per_chunk = max(1, chunk // n_samples)
    for lo in range(0, n_rays, rays_per_chunk):
        hi = min(n_rays, lo + rays_per_chunk)
        r = hi - lo
        depths = sample_stratified_batch(
            np.asarray(t_near)[lo:hi] if np.ndim(t_near) else t_near,
            np.asarray(t_far)[lo:hi] if np.ndim(t_far) else t_far,
            n_samples, rng, r)
        deltas = intervals_from_depths(
            depths, np.asarray(t_far)[lo:hi] if np.ndim(t_far) else t_far)
        pts = origins[lo:hi, None, :] + depths[:, :, None] * dirs[lo:hi, None, :]
        dirs_flat = np.repeat(dirs[lo:hi], n_samples, axis=0)
        enc_d = np.repeat(positional_encode(dirs[lo:hi], params.config.l_dir),
                          n_samples, axis=0)
        batch = evaluate_points(params, pts.reshape(-1, 3), dirs_flat, enc_d=enc_d)
        density = batch.density.reshape(r, n_samples)
        if au_threshold is not None:
            hot = batch.au.reshape(r, n_samples) > au_threshold
            density = np.where(hot, density * density_attenuation, density)
        weights = compute_weights(density, deltas)
        points = PointBatch(
            colors=batch.colors.reshape(r, n_samples, 3),
            au=batch.au.reshape(r, n_samples),
            eu=batch.eu.reshape(r, n_samples),
            shape_score=batch.shape_score.reshape(r, n_samples),
            density=density,
        )
        out.append(composite_batch(weights, points, background=background))
    return PixelBatch(
        gamma=np.concatenate([p.gamma for p in out]),
        au=np.concatenate([p.au for p in out]),
        eu=np.concatenate([p.eu for p in out]),
        u=np.concatenate([p.u for p in out]),
        nu=np.concatenate([p.nu for p in out]),
        alpha=np.concatenate([p.alpha for p in out]),
        beta=np.concatenate([p.beta for p in out]),
        opacity=np.concatenate([p.opacity for p in out]),
        fallback=np.concatenate([p.fallback for p in out]),
    )


def render_view(params: FieldParams, camera, n_samples: int, background,
                rng: np.random.Generator | None = None,
                au_threshold: float | None = None,
                density_attenuation: float = 0.0) -> dict:
    """Render a full camera view; returns image plus uncertainty maps."""
    origins, dirs = camera.rays()
    px = render_rays(params, origins, dirs, camera.near, camera.far,
                     n_samples, background, rng=rng,
                     au_threshold=au_threshold,
                     density_attenuation=density_attenuation)
    h, w = camera.height, camera.width
    return {
        "color": px.gamma.reshape(h, w, 3),
        "au": px.au.reshape(h, w),
        "eu": px.eu.reshape(h, w),
        "u": px.u.reshape(h, w),
        "alpha": px.alpha.reshape(h, w),
        "nu": px.nu.reshape(h, w),
        "beta": px.beta.reshape(h, w),
        "opacity": px.opacity.reshape(h, w),
        "fallback": px.fallback.reshape(h, w),
    }
