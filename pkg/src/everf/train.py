"""Ray-batched optimization with Adam.

Supports three objectives over the shared field/rendering stack:

* ``vanilla``    - mean squared error on the composited color,
* ``normal``     - Gaussian NLL with the aleatoric head as pixel variance,
* ``evidential`` - Student-t NLL of the pixel NIG plus evidence regularizer.

Training is single-threaded and bit-reproducible for a fixed seed: the RNG
draws (pixel indices, stratified jitter) happen in a fixed order and the
numpy kernels are deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import evidential as ev
from .autodiff import ParamStore, Tape
from .baselines import gaussian_nll_terms
from .config import EPS_UNCERTAINTY
from .field import (FieldConfig, FieldParams, PointBatch, evaluate_points,
                    positional_encode)
from .metrics import psnr
from .render import (composite_batch, compute_weights, intervals_from_depths,
                     render_view, sample_stratified_batch)
from .scene import ViewSet

OBJECTIVES = ("evidential", "normal", "vanilla")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params=None, iteration=None):
        super().__init__(message)
        self.params = params
        self.iteration = iteration


@dataclass
class TrainConfig:
    objective: str = "evidential"
    lambda_reg: float = 1e-2
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_rays: int = 1024
    iterations: int = 20000
    samples_per_ray: int = 64
    seed: int = 0
    eval_interval: int = 0          # 0: evaluate only at the end
    eval_samples_per_ray: int = 64
    log_interval: int = 100
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        for name in ("lr", "beta1", "beta2", "adam_eps", "batch_rays",
                     "samples_per_ray"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_reg < 0 or self.iterations < 0:
            raise ValueError("lambda_reg and iterations must be >= 0")


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, store: ParamStore) -> "OptimState":
        return cls(m={k: np.zeros_like(p) for k, p in store.values.items()},
                   v={k: np.zeros_like(p) for k, p in store.values.items()})


def adam_step(store: ParamStore, state: OptimState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place; raises on non-finite gradients."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in store.values.items():
        g = store.grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name!r} at step {t}",
                                   iteration=t)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def _flatten_views(views: ViewSet):
    origins, dirs, near, far, gt = [], [], [], [], []
    for cam, img in zip(views.cameras, views.images):
        o, d = cam.rays()
        origins.append(o)
        dirs.append(d)
        near.append(np.full(o.shape[0], cam.near))
        far.append(np.full(o.shape[0], cam.far))
        gt.append(img.reshape(-1, 3))
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(near), np.concatenate(far), np.concatenate(gt))


def batch_loss(params: FieldParams, tape: Tape, origins, dirs, near, far, gt,
               n_samples: int, cfg: TrainConfig, background,
               rng: np.random.Generator | None):
    """Build the objective for one ray batch on the tape.

    Returns (scalar loss Tensor, nll value, reg value).  Rays that hit the
    empty-ray fallback are masked out of the batch mean.
    """
    r = origins.shape[0]
    depths = sample_stratified_batch(near, far, n_samples, rng, r)
    deltas = intervals_from_depths(depths, far)
    pts = origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]
    dirs_flat = np.repeat(dirs, n_samples, axis=0)
    enc_d = np.repeat(positional_encode(dirs, params.config.l_dir), n_samples, axis=0)

    out = evaluate_points(params, pts.reshape(-1, 3), dirs_flat, tape=tape,
                          enc_d=enc_d)
    density = ad.reshape(out.density, (r, n_samples))
    weights = compute_weights(density, deltas)
    points = PointBatch(
        colors=ad.reshape(out.colors, (r, n_samples, 3)),
        au=ad.reshape(out.au, (r, n_samples)),
        eu=ad.reshape(out.eu, (r, n_samples)),
        shape_score=ad.reshape(out.shape_score, (r, n_samples)),
        density=density,
    )
    px = composite_batch(weights, points, background=background)

    valid = (~px.fallback).astype(np.float64)
    n_valid = max(float(valid.sum()), 1.0)

    if cfg.objective == "vanilla":
        err = ad.mean(ad.square(gt - px.gamma), axis=1)
        loss = ad.asum(err * valid) / n_valid
        return loss, float(ad.value(loss)), 0.0

    if cfg.objective == "normal":
        sigma_sq = ad.reshape(px.au + EPS_UNCERTAINTY, (r, 1))
        nll = ad.asum(gaussian_nll_terms(gt, px.gamma, sigma_sq), axis=1)
        loss = ad.asum(nll * valid) / n_valid
        return loss, float(ad.value(loss)), 0.0

    nu = ad.reshape(px.nu, (r, 1))
    alpha = ad.reshape(px.alpha, (r, 1))
    beta = ad.reshape(px.beta, (r, 1))
    nll = ad.asum(ev.nll_terms(gt, px.gamma, nu, alpha, beta), axis=1)
    abs_err = ad.mean(ad.absolute(gt - px.gamma), axis=1)
    reg = abs_err * (2.0 * px.nu + px.alpha)
    nll_mean = ad.asum(nll * valid) / n_valid
    reg_mean = ad.asum(reg * valid) / n_valid
    loss = nll_mean + cfg.lambda_reg * reg_mean
    return loss, float(ad.value(nll_mean)), float(ad.value(reg_mean))


def evaluate_psnr(params: FieldParams, views: ViewSet, background,
                  n_samples: int, chunk: int = 16384) -> float:
    """Mean PSNR of deterministic renders against the stored images."""
    vals = []
    for cam, img in zip(views.cameras, views.images):
        rendered = render_view(params, cam, n_samples, background)["color"]
        vals.append(psnr(rendered, img))
    return float(np.mean(vals))


def train(views: ViewSet, cfg: TrainConfig, background,
          eval_views: ViewSet | None = None,
          initial: FieldParams | None = None,
          state: OptimState | None = None):
    """Optimize a field on the training views.

    Returns (params, trace) where trace is a list of dict rows following
    the CSV schema iteration,total,nll,reg,psnr_eval.
    """
    cfg.validate()
    if len(views) < 1:
        raise ValueError("need at least one training view")
    rng = np.random.default_rng(cfg.seed)
    params = initial if initial is not None else FieldParams.create(cfg.field, rng)
    state = state if state is not None else OptimState.for_params(params.store)
    origins, dirs, near, far, gt = _flatten_views(views)
    n_pixels = origins.shape[0]

    trace: list[dict] = []
    last_good = params.copy()
    tape = Tape()
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n_pixels, size=cfg.batch_rays)
        params.store.zero_grads()
        loss, nll_val, reg_val = batch_loss(
            params, tape, origins[idx], dirs[idx], near[idx], far[idx],
            gt[idx], cfg.samples_per_ray, cfg, background, rng)
        total = float(ad.value(loss))
        if not math.isfinite(total):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}",
                                   params=last_good, iteration=it)
        tape.backward(loss, params.store, check_finite=False)
        try:
            adam_step(params.store, state, cfg)
        except TrainingDiverged as exc:
            exc.params = last_good
            raise

        logged = (it % cfg.log_interval == 0) or it == cfg.iterations
        evaled = cfg.eval_interval > 0 and it % cfg.eval_interval == 0
        if evaled or it == cfg.iterations:
            last_good = params.copy()
        if logged or evaled:
            row = {"iteration": it, "total": total, "nll": nll_val,
                   "reg": reg_val, "psnr_eval": ""}
            if evaled and eval_views is not None:
                row["psnr_eval"] = evaluate_psnr(
                    params, eval_views, background, cfg.eval_samples_per_ray)
            trace.append(row)
    return params, trace


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="\n") as f:
        writer = csv.DictWriter(f, fieldnames=["iteration", "total", "nll",
                                               "reg", "psnr_eval"],
                                lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
