"""Uncertainty applications: scene cleaning and active view selection.

Cleaning exploits the aleatoric head: samples whose AU exceeds a threshold
get their density attenuated before weight computation, making noisy
floaters transparent.  Active learning exploits the epistemic head: after
each round the candidate view with the highest mean EU is the one the
model knows least about, so it joins the training pool next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .config import EU_EMPTY_RAY
from .field import FieldParams
from .metrics import psnr
from .render import render_view
from .scene import SceneSpec, ViewSet
from .train import OptimState, TrainConfig, evaluate_psnr, train


@dataclass
class CleaningConfig:
    au_threshold: float          # tau: attenuate samples with AU above this
    attenuation: float = 0.0     # density multiplier for flagged samples

    def __post_init__(self):
        if self.au_threshold <= 0:
            raise ValueError("threshold must be positive")
        if not 0.0 <= self.attenuation <= 1.0:
            raise ValueError("attenuation factor must lie in [0,1]")


@dataclass
class ActiveLearnConfig:
    initial_views: int = 5
    rounds: int = 5
    views_per_round: int = 5
    epochs_per_round: int = 5    # one epoch = one pass over current pixels
    strategy: str = "eu"         # "eu" | "random"
    score_downsample: int = 4    # render candidates at 1/4 resolution
    score_samples_per_ray: int = 24

    def __post_init__(self):
        if self.strategy not in ("eu", "random"):
            raise ValueError("strategy must be 'eu' or 'random'")
        if min(self.initial_views, self.views_per_round,
               self.epochs_per_round) < 1 or self.rounds < 0:
            raise ValueError("counts must be >= 1 (rounds >= 0)")


def clean_render(params: FieldParams, camera, background, n_samples: int,
                 config: CleaningConfig) -> dict:
    """Render a view with high-AU samples made transparent."""
    return render_view(params, camera, n_samples, background,
                       au_threshold=config.au_threshold,
                       density_attenuation=config.attenuation)


def _downsampled_camera(cam, factor: int):
    from .scene import Camera
    return Camera(cam.rotation, cam.position, cam.focal / factor,
                  max(1, cam.width // factor), max(1, cam.height // factor),
                  cam.near, cam.far)


def mean_eu(render_out: dict) -> float:
    """Mean epistemic uncertainty over pixels that carry a prediction.

    Empty-ray fallback pixels hold the EU_max sentinel rather than a model
    output, so they are excluded; a view with no valid pixels at all scores
    the sentinel (nothing is known about it).
    """
    valid = ~render_out["fallback"]
    if not np.any(valid):
        return EU_EMPTY_RAY
    return float(np.mean(render_out["eu"][valid]))


def score_view_eu(params: FieldParams, camera, background,
                  config: ActiveLearnConfig) -> float:
    """Mean pixel EU of a low-resolution render from the candidate camera."""
    cam = _downsampled_camera(camera, config.score_downsample)
    out = render_view(params, cam, config.score_samples_per_ray, background)
    score = mean_eu(out)
    if not (score > 0 and math.isfinite(score)):
        raise RuntimeError(f"degenerate EU score {score}")
    return score


def active_learn(scene: SceneSpec, pool: ViewSet, test_views: ViewSet,
                 config: ActiveLearnConfig, train_cfg: TrainConfig,
                 seed: int) -> list[dict]:
    """Iterative view selection; returns rows round,strategy,seed,n_views,psnr.

    The model is warm-started across rounds.  Each round trains for
    ``epochs_per_round`` passes over the current training pixels, logs the
    held-out PSNR, then moves ``views_per_round`` pool views into the
    training set: the highest-EU ones or random ones.
    """
    needed = config.initial_views + config.rounds * config.views_per_round
    if len(pool) < needed:
        raise ValueError(f"pool has {len(pool)} views, need {needed}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    current = list(order[: config.initial_views])
    remaining = list(order[config.initial_views:])

    pixels_per_view = pool.cameras[0].width * pool.cameras[0].height
    params = FieldParams.create(train_cfg.field, rng)
    state = OptimState.for_params(params.store)
    rows = []
    for rnd in range(config.rounds + 1):
        subset = pool.subset(current)
        epoch_iters = max(1, math.ceil(
            config.epochs_per_round * len(current) * pixels_per_view
            / train_cfg.batch_rays))
        cfg_round = TrainConfig(**{**train_cfg.__dict__,
                                   "iterations": epoch_iters,
                                   "seed": seed + 1000 * rnd})
        params, _ = train(subset, cfg_round, scene.background,
                          initial=params, state=state)
        rows.append({
            "round": rnd,
            "strategy": config.strategy,
            "seed": seed,
            "n_views": len(current),
            "psnr": evaluate_psnr(params, test_views, scene.background,
                                  train_cfg.eval_samples_per_ray),
        })
        if rnd == config.rounds or not remaining:
            break
        if config.strategy == "eu":
            scores = [score_view_eu(params, pool.cameras[i], scene.background,
                                    config) for i in remaining]
            chosen = np.argsort(-np.asarray(scores), kind="stable")[
                : config.views_per_round]
        else:
            chosen = rng.permutation(len(remaining))[: config.views_per_round]
        picked = [remaining[i] for i in chosen]
        current.extend(picked)
        remaining = [i for i in remaining if i not in set(picked)]
    return rows
