"""Command-line entry points.

Commands: train, render, eval, clean, active, sweep-lambda, oracle-check.
Options come from a YAML run config (strict: unknown keys are rejected)
with flag overrides; ``--seed`` is mandatory for train/active so every
long run is reproducible by construction.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np
import yaml

from . import __version__
from .apps import ActiveLearnConfig, CleaningConfig, active_learn, clean_render
from .baselines import mse
from .field import FieldConfig, load_params, save_params
from .imgio import normalize_for_preview, write_pfm, write_png
from .metrics import ause, cap_psnr, nll_metric, per_pixel_error, psnr, ssim
from .oracles import run_all
from .render import render_view
from .scene import (RingSpec, SceneSpec, default_scene, generate_views,
                    ground_truth_image, inject_aleatoric, inject_transients,
                    left_half_mask, load_scene, ring_cameras)
from .train import TrainConfig, TrainingDiverged, train, write_trace


@dataclasses.dataclass
class ViewsConfig:
    n_train: int = 20
    n_test: int = 8
    n_pool: int = 30
    width: int = 64
    height: int = 64
    radius: float = 3.0
    elevation_deg: float = 25.0
    fov_deg: float = 40.0
    azimuth_start_deg: float = 0.0
    azimuth_end_deg: float = 360.0
    test_azimuth_offset_deg: float = 9.0
    n_quad: int = 256


@dataclasses.dataclass
class PerturbConfig:
    noise_sigma: float = 0.0
    noise_region: str = "none"      # none | left_half
    transient_count: int = 0


@dataclasses.dataclass
class ActiveConfig:
    initial_views: int = 5
    rounds: int = 5
    views_per_round: int = 5
    epochs_per_round: int = 5
    score_downsample: int = 4
    score_samples_per_ray: int = 24


@dataclasses.dataclass
class RunConfig:
    scene: str | None = None
    out_dir: str = "out"
    seed: int | None = None
    method: str = "evidential"
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    views: ViewsConfig = dataclasses.field(default_factory=ViewsConfig)
    perturb: PerturbConfig = dataclasses.field(default_factory=PerturbConfig)
    active: ActiveConfig = dataclasses.field(default_factory=ActiveConfig)


class ConfigError(Exception):
    pass


def _merge_into(obj, data: dict, where: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key {where}{key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge_into(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} does not exist")
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a mapping")
        _merge_into(cfg, raw, "")
    if cfg.scene is not None and not os.path.exists(cfg.scene):
        raise ConfigError(f"scene file {cfg.scene!r} does not exist")
    return cfg


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "scene", None) is not None:
        if not os.path.exists(args.scene):
            raise ConfigError(f"scene file {args.scene!r} does not exist")
        cfg.scene = args.scene
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "objective", None) is not None:
        cfg.train.objective = args.objective
    if getattr(args, "iterations", None) is not None:
        cfg.train.iterations = args.iterations
    if getattr(args, "lambda_reg", None) is not None:
        cfg.train.lambda_reg = args.lambda_reg
    if getattr(args, "method", None) is not None:
        cfg.method = args.method
    return cfg


def _scene_from(cfg: RunConfig) -> SceneSpec:
    return load_scene(cfg.scene) if cfg.scene else default_scene()


def _train_ring(v: ViewsConfig) -> RingSpec:
    return RingSpec(radius=v.radius, elevation_deg=v.elevation_deg,
                    azimuth_start_deg=v.azimuth_start_deg,
                    azimuth_end_deg=v.azimuth_end_deg, fov_deg=v.fov_deg,
                    width=v.width, height=v.height)


def _test_ring(v: ViewsConfig) -> RingSpec:
    off = v.test_azimuth_offset_deg
    return RingSpec(radius=v.radius, elevation_deg=v.elevation_deg,
                    azimuth_start_deg=v.azimuth_start_deg + off,
                    azimuth_end_deg=v.azimuth_end_deg + off, fov_deg=v.fov_deg,
                    width=v.width, height=v.height)


def _build_views(scene: SceneSpec, cfg: RunConfig, rng: np.random.Generator):
    v = cfg.views
    train_views = generate_views(scene, _train_ring(v), v.n_train, n_quad=v.n_quad)
    test_views = generate_views(scene, _test_ring(v), v.n_test, n_quad=v.n_quad)
    p = cfg.perturb
    if p.noise_sigma > 0:
        if p.noise_region == "left_half":
            region = left_half_mask(v.height, v.width)
        elif p.noise_region == "none":
            region = np.ones((v.height, v.width), dtype=bool)
        else:
            raise ConfigError(f"unknown noise region {p.noise_region!r}")
        train_views = inject_aleatoric(train_views, region, p.noise_sigma, rng)
    if p.transient_count > 0:
        train_views = inject_transients(train_views, p.transient_count, rng)
    return train_views, test_views


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("--seed is required for this command")
    return int(cfg.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    seed = _require_seed(cfg)
    cfg.train.seed = seed
    scene = _scene_from(cfg)
    rng = np.random.default_rng(seed)
    train_views, test_views = _build_views(scene, cfg, rng)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, "checkpoint.evf")
    try:
        params, trace = train(train_views, cfg.train, scene.background,
                              eval_views=test_views)
    except TrainingDiverged as exc:
        if exc.params is not None:
            save_params(exc.params, ckpt)
            print(f"aborted: {exc}; last checkpoint kept at {ckpt}",
                  file=sys.stderr)
        return 3
    save_params(params, ckpt)
    write_trace(trace, os.path.join(cfg.out_dir, "trace.csv"))
    final = trace[-1]["psnr_eval"] if trace else ""
    print(f"checkpoint: {ckpt}")
    if final != "":
        print(f"final eval PSNR: {final:.2f} dB")
    return 0


def _load_checkpoint(args):
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint {args.checkpoint!r} does not exist")
    return load_params(args.checkpoint)


def cmd_render(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    scene = _scene_from(cfg)
    params = _load_checkpoint(args)
    cams = ring_cameras(scene, _test_ring(cfg.views), cfg.views.n_test)
    if not 0 <= args.view < len(cams):
        raise ConfigError(f"--view must be in [0, {len(cams)})")
    cam = cams[args.view]
    out = render_view(params, cam, args.samples, scene.background)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_png(out["color"], os.path.join(cfg.out_dir, "color.png"))
    gt = ground_truth_image(scene, cam, cfg.views.n_quad)
    err = per_pixel_error(out["color"], gt, "rmse").reshape(cam.height, cam.width)
    write_pfm(err.astype(np.float32), os.path.join(cfg.out_dir, "error.pfm"))
    for key in ("au", "eu", "u"):
        write_pfm(out[key].astype(np.float32),
                  os.path.join(cfg.out_dir, f"{key}.pfm"))
        preview, lo, hi = normalize_for_preview(out[key])
        print(f"{key} preview range: [{lo:.3e}, {hi:.3e}]", file=sys.stderr)
        write_png(preview, os.path.join(cfg.out_dir, f"{key}.png"))
    print(f"wrote renders to {cfg.out_dir}")
    return 0


def _evaluate_checkpoint(params, scene, cfg: RunConfig, samples: int):
    cams = ring_cameras(scene, _test_ring(cfg.views), cfg.views.n_test)
    psnrs, ssims, nlls = [], [], []
    unc, errs_rmse = [], []
    for cam in cams:
        out = render_view(params, cam, samples, scene.background)
        gt = ground_truth_image(scene, cam, cfg.views.n_quad)
        psnrs.append(psnr(out["color"], gt))
        ssims.append(ssim(out["color"], gt))
        nlls.append(nll_metric(gt, out["color"], out["nu"], out["alpha"],
                               out["beta"]))
        unc.append(out["u"].reshape(-1))
        errs_rmse.append((out["color"], gt))
    u = np.concatenate(unc)
    e_rmse = np.concatenate([per_pixel_error(p, g, "rmse") for p, g in errs_rmse])
    e_mae = np.concatenate([per_pixel_error(p, g, "mae") for p, g in errs_rmse])
    return {
        "psnr": cap_psnr(float(np.mean(psnrs))),
        "ssim": float(np.mean(ssims)),
        "nll": float(np.mean(nlls)),
        "ause_rmse": ause(u, e_rmse, "rmse"),
        "ause_mae": ause(u, e_mae, "mae"),
    }


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    scene = _scene_from(cfg)
    params = _load_checkpoint(args)
    row = _evaluate_checkpoint(params, scene, cfg, args.samples)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(path, "w", newline="\n") as f:
        f.write("scene,method,psnr,ssim,nll,ause_rmse,ause_mae\n")
        f.write(f"{cfg.scene or 'default'},{cfg.method},{row['psnr']:.4f},"
                f"{row['ssim']:.4f},{row['nll']:.4f},{row['ause_rmse']:.6f},"
                f"{row['ause_mae']:.6f}\n")
    print(f"wrote {path}")
    print(row)
    return 0


def cmd_clean(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    scene = _scene_from(cfg)
    params = _load_checkpoint(args)
    taus = [float(t) for t in args.taus.split(",")]
    cams = ring_cameras(scene, _test_ring(cfg.views), cfg.views.n_test)
    gts = [ground_truth_image(scene, cam, cfg.views.n_quad) for cam in cams]
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    base = np.mean([mse(render_view(params, cam, args.samples,
                                    scene.background)["color"], gt)
                    for cam, gt in zip(cams, gts)])
    rows.append(("inf", base))
    for tau in taus:
        cc = CleaningConfig(au_threshold=tau, attenuation=args.attenuation)
        imgs = [clean_render(params, cam, scene.background, args.samples, cc)
                ["color"] for cam in cams]
        rows.append((f"{tau:g}", float(np.mean(
            [mse(img, gt) for img, gt in zip(imgs, gts)]))))
        write_png(imgs[0], os.path.join(cfg.out_dir, f"clean_tau{tau:g}.png"))
    path = os.path.join(cfg.out_dir, "clean.csv")
    with open(path, "w", newline="\n") as f:
        f.write("tau,test_mse\n")
        for tau, val in rows:
            f.write(f"{tau},{val:.8f}\n")
    print(f"wrote {path}")
    return 0


def cmd_active(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    seed = _require_seed(cfg)
    scene = _scene_from(cfg)
    pool = generate_views(scene, _train_ring(cfg.views), cfg.views.n_pool,
                          n_quad=cfg.views.n_quad)
    test_views = generate_views(scene, _test_ring(cfg.views), cfg.views.n_test,
                                n_quad=cfg.views.n_quad)
    a = cfg.active
    strategies = ("eu", "random") if args.strategy == "both" else (args.strategy,)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [seed]
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "active.csv")
    with open(path, "w", newline="\n") as f:
        f.write("round,strategy,seed,n_views,psnr\n")
        for strategy in strategies:
            for s in seeds:
                al_cfg = ActiveLearnConfig(
                    initial_views=a.initial_views, rounds=a.rounds,
                    views_per_round=a.views_per_round,
                    epochs_per_round=a.epochs_per_round, strategy=strategy,
                    score_downsample=a.score_downsample,
                    score_samples_per_ray=a.score_samples_per_ray)
                rows = active_learn(scene, pool, test_views, al_cfg,
                                    cfg.train, seed=s)
                for r in rows:
                    f.write(f"{r['round']},{r['strategy']},{r['seed']},"
                            f"{r['n_views']},{cap_psnr(r['psnr']):.4f}\n")
    print(f"wrote {path}")
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    seed = _require_seed(cfg)
    cfg.train.seed = seed
    cfg.train.objective = "evidential"
    scene = _scene_from(cfg)
    rng = np.random.default_rng(seed)
    train_views, test_views = _build_views(scene, cfg, rng)
    lambdas = [float(x) for x in args.lambdas.split(",")]
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "lambda_sweep.csv")
    with open(path, "w", newline="\n") as f:
        f.write("lambda_reg,psnr,ssim,nll,ause_rmse,ause_mae\n")
        for lam in lambdas:
            run_cfg = dataclasses.replace(cfg.train, lambda_reg=lam)
            params, _ = train(train_views, run_cfg, scene.background)
            row = _evaluate_checkpoint(params, scene, cfg,
                                       cfg.train.eval_samples_per_ray)
            f.write(f"{lam:g},{row['psnr']:.4f},{row['ssim']:.4f},"
                    f"{row['nll']:.4f},{row['ause_rmse']:.6f},"
                    f"{row['ause_mae']:.6f}\n")
            print(f"lambda={lam:g}: {row}")
    print(f"wrote {path}")
    return 0


def cmd_oracle_check(args) -> int:
    results = run_all()
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.detail}")
        failed += 0 if r.passed else 1
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="everf",
        description="evidential radiance fields on synthetic scenes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required=False):
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--scene", default=None, help="scene YAML file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       required=seed_required)

    p = sub.add_parser("train", help="optimize a field on generated views")
    common(p, seed_required=True)
    p.add_argument("--objective", choices=("evidential", "normal", "vanilla"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render color + uncertainty maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--samples", type=int, default=96)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="compute image/uncertainty metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=96)
    p.add_argument("--method", default=None, help="method label for the CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("clean", help="AU-thresholded cleaning sweep")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--taus", required=True, help="comma-separated thresholds")
    p.add_argument("--attenuation", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=96)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("active", help="EU-guided active view selection")
    common(p, seed_required=True)
    p.add_argument("--strategy", choices=("eu", "random", "both"),
                   default="both")
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds (default: --seed)")
    p.set_defaults(func=cmd_active)

    p = sub.add_parser("sweep-lambda", help="regularizer sensitivity sweep")
    common(p, seed_required=True)
    p.add_argument("--lambdas", required=True,
                   help="comma-separated regularization coefficients")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("oracle-check", help="run all verification oracles")
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
