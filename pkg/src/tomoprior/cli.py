"""Command-line surface: dataset generation, denoiser training,
measurement simulation, reconstruction, and evaluation.

Every command resolves its settings as defaults < config file < flags,
re-emits the resolved configuration into the run directory, and is fully
seeded, so a run directory can always be reproduced from its run.cfg.

Exit codes: 0 success, 2 usage/config error, 3 data/geometry mismatch,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import glob
import math
import os
import sys

import numpy as np

from . import baselines, dper, inr, phantoms, rawio, score, tomo
from .errors import ConfigError, DataMismatchError, NumericFaultError, ScheduleMismatchError, TrainingDivergenceError
from .metrics import psnr as psnr_metric
from .metrics import ssim as ssim_metric

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---- config files -----------------------------------------------------------


def load_config(path, schema):
    """Parse `key = value` lines; unknown keys are rejected."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key = key.strip()
            value = value.strip()
            if key not in schema:
                raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
            caster = schema[key]
            try:
                out[key] = caster(value) if value != "" else None
            except ValueError as e:
                raise ConfigError(f"{path}:{ln}: bad value for {key!r}: {e}") from e
    return out


def write_run_config(outdir, settings):
    rawio.write_manifest(os.path.join(outdir, "run.cfg"),
                         {k: ("" if v is None else v) for k, v in sorted(settings.items())})


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v}")


def _resolve(args, schema, defaults):
    """defaults < config file < explicit flags."""
    settings = dict(defaults)
    if getattr(args, "config", None):
        settings.update(load_config(args.config, schema))
    for key in schema:
        flag = key.replace(".", "_")
        val = getattr(args, flag, None)
        if val is not None:
            settings[key] = val
    return settings


def _jobs_cap(requested):
    cap = os.environ.get("TOMOPRIOR_THREADS")
    jobs = max(1, int(requested or 1))
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    return jobs


# ---- geometry/task plumbing ----------------------------------------------------


def build_geometry(settings):
    task = settings["task"]
    bins = int(settings["bins"])
    base = int(settings["base_views"])
    step = settings["ray_step_mult"] * (2.0 / bins)
    if task == "lact":
        return tomo.make_geometry("limited_angle", base_views=base, detector_bins=bins,
                                  range_deg=float(settings["range"]), ray_step=step)
    if task == "svct":
        return tomo.make_geometry("sparse_view", detector_bins=bins,
                                  view_count=int(settings["views"]), ray_step=step)
    if task == "full":
        return tomo.make_geometry("full", base_views=base, detector_bins=bins, ray_step=step)
    raise ConfigError(f"unknown task {task!r}")


def task_label(settings):
    if settings["task"] == "lact":
        return f"lact{int(settings['range'])}"
    if settings["task"] == "svct":
        return f"svct{int(settings['views'])}"
    return "full"


def load_image(path):
    return tomo.ImageGrid(rawio.read_tpraw(path))


def load_sinogram(path, geometry):
    values = rawio.read_tpraw(path)
    expect = (geometry.n_views, geometry.detector_bins)
    if values.shape != expect:
        raise DataMismatchError(
            f"sinogram {path} has shape {values.shape}, geometry expects {expect}"
        )
    return tomo.Sinogram(values, geometry)


GEOMETRY_SCHEMA = {
    "task": str, "range": float, "views": int, "bins": int,
    "base_views": int, "ray_step_mult": float,
}
GEOMETRY_DEFAULTS = {
    "task": "lact", "range": 90.0, "views": 20, "bins": 64,
    "base_views": 180, "ray_step_mult": 0.5,
}


def add_geometry_flags(p):
    p.add_argument("--task", choices=["lact", "svct", "full"])
    p.add_argument("--range", type=float, help="limited-angle scan range in degrees")
    p.add_argument("--views", type=int, help="sparse-view count")
    p.add_argument("--bins", type=int, help="detector bins")
    p.add_argument("--base-views", type=int, dest="base_views")
    p.add_argument("--ray-step-mult", type=float, dest="ray_step_mult",
                   help="ray sampling step as a multiple of detector spacing")


# ---- commands -------------------------------------------------------------------


def cmd_dataset(args):
    schema = {"count": int, "size": int, "seed": int, "outdir": str}
    settings = _resolve(args, schema, {"count": 2000, "size": 64, "seed": 1000, "outdir": "dataset"})
    if settings["count"] < 1:
        raise ConfigError("--count must be >= 1")
    if settings["size"] < 32:
        raise ConfigError("--size must be >= 32")
    manifest = phantoms.build_dataset(settings["count"], settings["size"], settings["seed"],
                                      settings["outdir"])
    write_run_config(settings["outdir"], settings)
    print(manifest)
    return EXIT_OK


def cmd_train_score(args):
    schema = {
        "dataset": str, "epochs": int, "batch": int, "lr": float, "seed": int,
        "T": int, "sigma_min": float, "sigma_max": float, "out": str,
        "loss_csv": str, "resume": str,
    }
    settings = _resolve(args, schema, {
        "dataset": "dataset", "epochs": 30, "batch": 16, "lr": 2e-4, "seed": 0,
        "T": 200, "sigma_min": 0.01, "sigma_max": 10.0, "out": "score.ndg",
        "loss_csv": None, "resume": None,
    })
    manifest_path = os.path.join(settings["dataset"], "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"dataset manifest not found: {manifest_path}")
    data, _ = phantoms.load_dataset(settings["dataset"])
    schedule = score.ve_schedule(settings["T"], settings["sigma_min"], settings["sigma_max"])
    if settings["resume"]:
        model = score.load_score(settings["resume"], expect_schedule=schedule)
    else:
        model = score.ScoreModel(schedule, seed=settings["seed"])
    log = []
    score.train_score(model, data, score.TrainConfig(
        epochs=settings["epochs"], batch_size=settings["batch"],
        learning_rate=settings["lr"], seed=settings["seed"]), log=log)
    score.save_score(settings["out"], model)
    if settings["loss_csv"]:
        with open(settings["loss_csv"], "w") as f:
            f.write("epoch,step,loss\n")
            for epoch, step, loss in log:
                f.write(f"{epoch},{step},{loss:.8g}\n")
    print(settings["out"])
    return EXIT_OK


def cmd_simulate(args):
    schema = dict(GEOMETRY_SCHEMA)
    schema.update({
        "phantom": str, "size": int, "noise": str, "b": float, "r": float,
        "var": float, "seed": int, "outdir": str,
    })
    settings = _resolve(args, schema, {
        **GEOMETRY_DEFAULTS,
        "phantom": "shepp-logan", "size": 64, "noise": "none",
        "b": 4e4, "r": 10.0, "var": 0.64, "seed": 0, "outdir": "sim",
    })
    if settings["noise"] not in ("none", "poisson", "gaussian"):
        raise ConfigError(f"unknown noise kind {settings['noise']!r}")
    geom = build_geometry(settings)
    if settings["phantom"] == "shepp-logan":
        img = phantoms.shepp_logan(settings["size"])
    elif settings["phantom"].startswith("ellipse:"):
        img = phantoms.gen_ellipse_phantom(int(settings["phantom"].split(":", 1)[1]),
                                           settings["size"])
    else:
        img = load_image(settings["phantom"])
    os.makedirs(settings["outdir"], exist_ok=True)
    sino = tomo.project_grid(img, geom)
    rawio.write_tpraw(os.path.join(settings["outdir"], "phantom.tpraw"), img.values)
    rawio.write_png(os.path.join(settings["outdir"], "phantom.png"), img.values)
    rawio.write_tpraw(os.path.join(settings["outdir"], "clean.tpraw"), sino.values)
    if settings["noise"] == "poisson":
        noisy = tomo.add_poisson_noise(sino, settings["b"], settings["r"], settings["seed"])
    elif settings["noise"] == "gaussian":
        noisy = tomo.add_gaussian_noise(sino, settings["var"], settings["seed"])
    else:
        noisy = sino
    rawio.write_tpraw(os.path.join(settings["outdir"], "noisy.tpraw"), noisy.values)
    write_run_config(settings["outdir"], settings)
    print(settings["outdir"])
    return EXIT_OK


def _recon_one(payload):
    (method, sino, model, cfg, gt) = payload
    if method == "dper":
        img, trace = dper.dper_reconstruct(sino, model, cfg, ground_truth=gt)
        return img, trace
    raise ValueError(method)


def cmd_reconstruct(args):
    schema = dict(GEOMETRY_SCHEMA)
    schema.update({
        "sino": str, "method": str, "checkpoint": str, "gt": str,
        "ri": int, "lambda": float, "T": int, "seed": int, "ensemble": int,
        "tweedie": _bool, "strategy": str, "sart_iters": int, "tv_weight": float,
        "outdir": str, "run_id": str, "jobs": int, "image_size": int,
    })
    settings = _resolve(args, schema, {
        **GEOMETRY_DEFAULTS,
        "sino": None, "method": "dper", "checkpoint": None, "gt": None,
        "ri": 5, "lambda": 1.0, "T": 200, "seed": 7, "ensemble": 0,
        "tweedie": True, "strategy": "full", "sart_iters": 20,
        "tv_weight": 0.01, "outdir": "runs", "run_id": None, "jobs": 1,
        "image_size": None,
    })
    if settings["sino"] is None:
        raise ConfigError("--sino is required")
    method = settings["method"]
    if method not in ("fbp", "sart", "admm_tv", "inr", "dper"):
        raise ConfigError(f"unknown method {method!r}")
    geom = build_geometry(settings)
    sino = load_sinogram(settings["sino"], geom)
    size = settings["image_size"] or geom.detector_bins
    gt = load_image(settings["gt"]) if settings["gt"] else None

    run_id = settings["run_id"] or f"{method}_{task_label(settings)}_s{settings['seed']}"
    rundir = os.path.join(settings["outdir"], run_id)
    os.makedirs(rundir, exist_ok=True)

    trace = None
    extra_outputs = {}
    if method == "fbp":
        img = tomo.ImageGrid(np.clip(tomo.fbp(sino, shape=(size, size)).values, 0, 1))
    elif method == "sart":
        img = tomo.ImageGrid(np.clip(
            baselines.sart(sino, baselines.SartConfig(iterations=settings["sart_iters"]),
                           shape=(size, size)).values, 0, 1))
    elif method == "admm_tv":
        rec, info = baselines.admm_tv(
            sino, baselines.AdmmTvConfig(tv_weight=settings["tv_weight"]), shape=(size, size))
        if info.cg_warnings:
            print(f"warning: CG hit the iteration cap in {info.cg_warnings} outer steps",
                  file=sys.stderr)
        img = tomo.ImageGrid(np.clip(rec.values, 0, 1))
    elif method == "inr":
        img = baselines.inr_only(sino, seed=settings["seed"])
    else:
        if not settings["checkpoint"]:
            raise ConfigError("--checkpoint is required for --method dper")
        model = score.load_score(settings["checkpoint"], expect_schedule=None)
        if model.schedule.T != settings["T"]:
            raise ScheduleMismatchError(
                f"checkpoint T={model.schedule.T} but --T {settings['T']}"
            )
        cfg = dper.ReconConfig(T=model.schedule.T, ri=settings["ri"], lam=settings["lambda"],
                               image_size=size, seed=settings["seed"],
                               use_tweedie=settings["tweedie"])
        if settings["strategy"] != "full":
            img, trace = dper.strategy_ablation(sino, model, cfg, settings["strategy"],
                                                ground_truth=gt)
        elif settings["ensemble"] and settings["ensemble"] >= 2:
            mean_img, std_img = dper.uncertainty_ensemble(sino, model, cfg,
                                                          settings["ensemble"],
                                                          ground_truth=gt,
                                                          jobs=_jobs_cap(settings["jobs"]))
            img = mean_img
            extra_outputs["std"] = std_img
        else:
            img, trace = dper.dper_reconstruct(sino, model, cfg, ground_truth=gt)

    rawio.write_tpraw(os.path.join(rundir, "recon.tpraw"), img.values)
    rawio.write_png(os.path.join(rundir, "recon.png"), img.values)
    for name, extra in extra_outputs.items():
        rawio.write_tpraw(os.path.join(rundir, f"{name}.tpraw"), extra.values)
        rawio.write_png(os.path.join(rundir, f"{name}.png"), extra.values,
                        window=max(float(extra.values.max()), 1e-6), level=float(extra.values.max()) / 2)
    if trace is not None:
        trace.write_csv(os.path.join(rundir, "trace.csv"))
    write_run_config(rundir, settings)
    if gt is not None:
        p = psnr_metric(img.values, gt.values)
        s = ssim_metric(img.values, gt.values)
        rawio.append_metrics_row(os.path.join(settings["outdir"], "metrics.csv"),
                                 method, task_label(settings), settings["seed"], p, s)
        print(f"psnr={p:.4f} ssim={s:.4f}")
    print(rundir)
    return EXIT_OK


def cmd_evaluate(args):
    schema = dict(GEOMETRY_SCHEMA)
    schema.update({
        "recon": str, "gt": str, "csv": str, "method": str, "seed": int,
        "diff_png": _bool, "sweep_ri": str, "sino": str, "checkpoint": str,
        "outdir": str, "lambda": float, "T": int, "image_size": int,
    })
    settings = _resolve(args, schema, {
        **GEOMETRY_DEFAULTS,
        "recon": None, "gt": None, "csv": "metrics.csv", "method": "unknown",
        "seed": 0, "diff_png": False, "sweep_ri": None, "sino": None,
        "checkpoint": None, "outdir": "eval", "lambda": 1.0, "T": 200,
        "image_size": None,
    })
    if settings["gt"] is None:
        raise ConfigError("--gt is required")
    gt = load_image(settings["gt"])

    if settings["sweep_ri"]:
        if not settings["sino"] or not settings["checkpoint"]:
            raise ConfigError("--sweep-ri needs --sino and --checkpoint")
        geom = build_geometry(settings)
        sino = load_sinogram(settings["sino"], geom)
        model = score.load_score(settings["checkpoint"])
        size = settings["image_size"] or geom.detector_bins
        cfg = dper.ReconConfig(T=model.schedule.T, ri=1, lam=settings["lambda"],
                               image_size=size, seed=settings["seed"])
        ri_values = [int(v) for v in settings["sweep_ri"].split(",")]
        rows = dper.sweep_ri(sino, model, cfg, ri_values, gt)
        os.makedirs(settings["outdir"], exist_ok=True)
        out = os.path.join(settings["outdir"], "ri_sweep.csv")
        dper.write_sweep_csv(out, rows)
        for ri, p, s, wall in rows:
            print(f"ri={ri} psnr={p:.4f} ssim={s:.4f} wall={wall:.1f}s")
        print(out)
        return EXIT_OK

    if settings["recon"] is None:
        raise ConfigError("--recon is required")
    paths = sorted(glob.glob(settings["recon"]))
    if not paths:
        raise ConfigError(f"no files match {settings['recon']!r}")
    for path in paths:
        img = load_image(path)
        p = psnr_metric(img.values, gt.values)
        s = ssim_metric(img.values, gt.values)
        rawio.append_metrics_row(settings["csv"], settings["method"], task_label(settings),
                                 settings["seed"], p, s)
        if settings["diff_png"]:
            diff = np.abs(img.values - gt.values)
            rawio.write_png(os.path.splitext(path)[0] + "_diff.png", diff,
                            window=max(diff.max(), 1e-6), level=diff.max() / 2)
        print(f"{path}: psnr={p:.4f} ssim={s:.4f}")
    return EXIT_OK


# ---- entry ------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="tomoprior",
                                description="Desk-scale CT reconstruction experiments")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="generate a phantom training corpus")
    d.add_argument("--config")
    d.add_argument("--count", type=int)
    d.add_argument("--size", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--outdir")
    d.set_defaults(fn=cmd_dataset)

    t = sub.add_parser("train-score", help="train the diffusion denoiser")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--T", type=int, dest="T")
    t.add_argument("--sigma-min", type=float, dest="sigma_min")
    t.add_argument("--sigma-max", type=float, dest="sigma_max")
    t.add_argument("--out")
    t.add_argument("--loss-csv", dest="loss_csv")
    t.add_argument("--resume")
    t.set_defaults(fn=cmd_train_score)

    s = sub.add_parser("simulate", help="project a phantom and add noise")
    s.add_argument("--config")
    add_geometry_flags(s)
    s.add_argument("--phantom", help="'shepp-logan', 'ellipse:<seed>' or a TPRAW path")
    s.add_argument("--size", type=int)
    s.add_argument("--noise", choices=["none", "poisson", "gaussian"])
    s.add_argument("--b", type=float)
    s.add_argument("--r", type=float)
    s.add_argument("--var", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--outdir")
    s.set_defaults(fn=cmd_simulate)

    r = sub.add_parser("reconstruct", help="run a reconstruction method")
    r.add_argument("--config")
    add_geometry_flags(r)
    r.add_argument("--sino")
    r.add_argument("--method", choices=["fbp", "sart", "admm_tv", "inr", "dper"])
    r.add_argument("--checkpoint")
    r.add_argument("--gt")
    r.add_argument("--ri", type=int)
    r.add_argument("--lambda", type=float, dest="lambda")
    r.add_argument("--T", type=int, dest="T")
    r.add_argument("--seed", type=int)
    r.add_argument("--ensemble", type=int)
    r.add_argument("--tweedie", type=_bool)
    r.add_argument("--strategy", choices=["full", "A", "B"])
    r.add_argument("--sart-iters", type=int, dest="sart_iters")
    r.add_argument("--tv-weight", type=float, dest="tv_weight")
    r.add_argument("--outdir")
    r.add_argument("--run-id", dest="run_id")
    r.add_argument("--jobs", type=int)
    r.add_argument("--image-size", type=int, dest="image_size")
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score reconstructions against ground truth")
    e.add_argument("--config")
    add_geometry_flags(e)
    e.add_argument("--recon", help="TPRAW path or glob")
    e.add_argument("--gt")
    e.add_argument("--csv")
    e.add_argument("--method")
    e.add_argument("--seed", type=int)
    e.add_argument("--diff-png", type=_bool, dest="diff_png")
    e.add_argument("--sweep-ri", dest="sweep_ri")
    e.add_argument("--sino")
    e.add_argument("--checkpoint")
    e.add_argument("--outdir")
    e.add_argument("--lambda", type=float, dest="lambda")
    e.add_argument("--T", type=int, dest="T")
    e.add_argument("--image-size", type=int, dest="image_size")
    e.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataMismatchError, ScheduleMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergenceError, NumericFaultError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
