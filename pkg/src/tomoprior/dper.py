"""Alternating reconstruction: reverse-SDE sampling interleaved with
coordinate-network data-fidelity refinement every RI steps.

Each refinement takes the current sample, denoises it to a clean prior
estimate, embeds that prior into the network, refines the network against
the measurements with a noise-level-weighted consistency pull, then
re-noises the rendered result back onto the sampling trajectory.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import inr_only
from .errors import DataMismatchError, ScheduleMismatchError
from .inr import FitConfig, FourierEncoding, INRModel, _RayBank, embed_prior, penalty_weight, refine_fidelity, render
from .metrics import psnr as psnr_metric
from .metrics import ssim as ssim_metric
from .score import renoise, reverse_step, tweedie_denoise
from .tomo import ImageGrid, Sinogram, fbp, project_grid

__all__ = [
    "ReconConfig",
    "ReconTrace",
    "TraceEvent",
    "penalty_weight",
    "dper_reconstruct",
    "uncertainty_ensemble",
    "sweep_ri",
    "strategy_ablation",
]


@dataclass
class ReconConfig:
    T: int = 200
    ri: int = 5
    lam: float = 1.0
    image_size: int = 64
    seed: int = 0
    use_tweedie: bool = True
    embed_iterations: int = 50
    embed_batch: int = 1000
    embed_lr: float = 1e-3
    refine_iterations: int = 250
    refine_batch: int = 128
    refine_lr: float = 1e-4
    inr_hidden: tuple = (96, 96, 96)
    inr_features: int = 64
    inr_bandwidth: float = 3.0

    def __post_init__(self):
        if not (1 <= self.ri <= self.T):
            raise ValueError(f"RI must lie in [1, T], got {self.ri} with T={self.T}")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.image_size < 8:
            raise ValueError("image_size too small")


@dataclass
class TraceEvent:
    t: int
    event: str
    residual: float | None = None
    psnr: float | None = None
    mu: float | None = None


@dataclass
class ReconTrace:
    events: list[TraceEvent] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, t, event, residual=None, psnr=None, mu=None):
        self.events.append(TraceEvent(t, event, residual, psnr, mu))

    def refine_events(self):
        return [e for e in self.events if e.event == "refine"]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "event", "residual", "psnr", "mu"])
            for e in self.events:
                w.writerow([
                    e.t,
                    e.event,
                    "" if e.residual is None else f"{e.residual:.8g}",
                    "" if e.psnr is None else f"{e.psnr:.6g}",
                    "" if e.mu is None else f"{e.mu:.8g}",
                ])


def _fresh_inr(cfg: ReconConfig, seed):
    enc = FourierEncoding(num_features=cfg.inr_features, bandwidth=cfg.inr_bandwidth, seed=seed)
    return INRModel(encoding=enc, hidden=cfg.inr_hidden, seed=seed)


def _check_inputs(y: Sinogram, score_model, cfg: ReconConfig):
    sched = score_model.schedule
    if sched.T != cfg.T:
        raise ScheduleMismatchError(
            f"score model schedule has T={sched.T}, reconstruction requested T={cfg.T}"
        )
    if y.values.shape != (y.geometry.n_views, y.geometry.detector_bins):
        raise DataMismatchError("sinogram/geometry shape mismatch")
    return sched


def _residual(image_values, y: Sinogram):
    sim = project_grid(ImageGrid(image_values), y.geometry)
    return float(np.mean(np.abs(sim.values - y.values)))


def dper_reconstruct(y: Sinogram, score_model, cfg: ReconConfig, ground_truth=None):
    """Full alternation (reverse-SDE prior sampling + measurement refinement).

    Returns (final image clamped to [0,1], trace). The trace records every
    sampling step and, at each refinement, the post-refinement projection
    residual, the consistency weight, and PSNR when ground truth is given.
    """
    sched = _check_inputs(y, score_model, cfg)
    shape = (cfg.image_size, cfg.image_size)
    seeder = np.random.SeedSequence([cfg.seed, 0xD1FF])
    s_sample, s_renoise, s_inr = seeder.spawn(3)
    rng_sample = np.random.default_rng(s_sample)
    rng_renoise = np.random.default_rng(s_renoise)
    event_seeds = np.random.default_rng(s_inr).integers(0, 2**31 - 1, size=2 * cfg.T + 2)

    bank = _RayBank(y.geometry, shape=shape)
    inr_model = _fresh_inr(cfg, int(event_seeds[0]))
    trace = ReconTrace(meta={"T": cfg.T, "ri": cfg.ri, "lam": cfg.lam, "seed": cfg.seed,
                             "tweedie": cfg.use_tweedie})

    gt = None if ground_truth is None else np.asarray(
        getattr(ground_truth, "values", ground_truth), dtype=np.float64
    )

    x = rng_sample.standard_normal(shape) * sched.sigma[cfg.T]
    refined = False
    for t in range(cfg.T, 0, -1):
        x_next = reverse_step(x, t, score_model, sched, rng_sample)
        if (t - 1) % cfg.ri == 0:
            x0t = tweedie_denoise(x, t, score_model, sched) if cfg.use_tweedie else x.copy()
            trace.add(t, "tweedie" if cfg.use_tweedie else "skip_tweedie")
            prior = ImageGrid(x0t)
            sigma_t = float(sched.sigma[t])
            embed_prior(inr_model, prior,
                        FitConfig(cfg.embed_iterations, cfg.embed_batch, cfg.embed_lr,
                                  seed=int(event_seeds[2 * t])))
            trace.add(t, "embed")
            refine_fidelity(inr_model, y, prior, cfg.lam, sigma_t,
                            FitConfig(cfg.refine_iterations, cfg.refine_batch, cfg.refine_lr,
                                      seed=int(event_seeds[2 * t + 1])),
                            ray_bank=bank)
            x_hat = render(inr_model, shape).values
            mu = penalty_weight(cfg.lam, sigma_t)
            p = None if gt is None else psnr_metric(np.clip(x_hat, 0, 1), gt)
            trace.add(t, "refine", residual=_residual(x_hat, y), psnr=p, mu=mu)
            x = renoise(x_hat, t - 1, sched, rng_renoise)
            trace.add(t, "renoise")
            refined = True
        else:
            x = x_next
            trace.add(t, "sde_step")

    if refined:
        final = np.clip(render(inr_model, shape).values, 0.0, 1.0)
    else:
        # RI never divides: close with one Tweedie estimate at t=1
        final = np.clip(tweedie_denoise(x, 1, score_model, sched), 0.0, 1.0)
    return ImageGrid(final), trace


def _ensemble_member(payload):
    y, score_model, cfg, ground_truth = payload
    img, _ = dper_reconstruct(y, score_model, cfg, ground_truth)
    return img.values


def uncertainty_ensemble(y: Sinogram, score_model, cfg: ReconConfig, n, seeds=None,
                         ground_truth=None, jobs=1):
    """n independent-seed reconstructions; pixelwise mean and std images.

    Members are fully independent; jobs > 1 runs them in a process pool
    (results are collected by member index, so parallelism does not change
    the output).
    """
    if n < 2:
        raise ValueError("ensemble needs n >= 2")
    if seeds is None:
        seeds = [cfg.seed + 7919 * i for i in range(n)]
    if len(seeds) != n:
        raise ValueError("seeds length must equal n")
    payloads = [(y, score_model, replace(cfg, seed=int(s)), ground_truth) for s in seeds]
    if jobs > 1:
        import multiprocessing as mp

        with mp.Pool(min(jobs, n)) as pool:
            stack = pool.map(_ensemble_member, payloads)
    else:
        stack = [_ensemble_member(p) for p in payloads]
    stack = np.stack(stack)
    return ImageGrid(stack.mean(axis=0)), ImageGrid(stack.std(axis=0))


def sweep_ri(y: Sinogram, score_model, cfg: ReconConfig, ri_values, ground_truth):
    """One reconstruction per refinement interval, identical seeds otherwise.

    Returns rows of (ri, psnr, ssim, wall_seconds).
    """
    gt = np.asarray(getattr(ground_truth, "values", ground_truth), dtype=np.float64)
    rows = []
    for ri in ri_values:
        if not (1 <= ri <= cfg.T):
            raise ValueError(f"RI {ri} outside [1, T={cfg.T}]")
        t0 = time.perf_counter()
        img, _ = dper_reconstruct(y, score_model, replace(cfg, ri=int(ri)), ground_truth)
        wall = time.perf_counter() - t0
        rows.append((int(ri), psnr_metric(img.values, gt), ssim_metric(img.values, gt), wall))
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ri", "psnr", "ssim", "wall_seconds"])
        for ri, p, s, wall in rows:
            w.writerow([ri, f"{p:.6g}", f"{s:.6g}", f"{wall:.3f}"])


def strategy_ablation(y: Sinogram, score_model, cfg: ReconConfig, strategy,
                      renoise_t=None, ground_truth=None):
    """Single-pass couplings of the network fit and the diffusion sampler.

    "A": measurement-only network fit, then re-noise to mid-schedule and
    sample down without further fitting. "B": FBP, re-noise, sample down,
    then a single embed+refine pass. "full": the complete alternation.
    Returns (image, trace); the trace records the re-noising level used.
    """
    sched = _check_inputs(y, score_model, cfg)
    shape = (cfg.image_size, cfg.image_size)
    if strategy == "full":
        return dper_reconstruct(y, score_model, cfg, ground_truth)
    t_mid = cfg.T // 2 if renoise_t is None else int(renoise_t)
    if not (0 <= t_mid <= cfg.T):
        raise ValueError(f"renoise_t {t_mid} outside [0, T]")
    seeder = np.random.SeedSequence([cfg.seed, 0xAB1A])
    s_sample, s_renoise, s_inr = seeder.spawn(3)
    rng_sample = np.random.default_rng(s_sample)
    trace = ReconTrace(meta={"strategy": strategy, "renoise_t": t_mid, "seed": cfg.seed})

    if strategy == "A":
        start = inr_only(y, seed=cfg.seed, hidden=cfg.inr_hidden,
                         num_features=cfg.inr_features, bandwidth=cfg.inr_bandwidth)
        trace.add(cfg.T, "inr_fit", residual=_residual(start.values, y))
    elif strategy == "B":
        start = ImageGrid(np.clip(fbp(y, shape=shape).values, 0.0, 1.0))
        trace.add(cfg.T, "fbp", residual=_residual(start.values, y))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    x = start.values
    if t_mid > 0:
        x = renoise(x, t_mid, sched, np.random.default_rng(s_renoise))
        trace.add(t_mid, "renoise")
        for t in range(t_mid, 0, -1):
            x = reverse_step(x, t, score_model, sched, rng_sample)
            trace.add(t, "sde_step")
        x = tweedie_denoise(x, 1, score_model, sched)
        trace.add(1, "tweedie")

    if strategy == "A":
        final = np.clip(x, 0.0, 1.0)
    else:
        # single fidelity pass at the terminal noise level
        event_seeds = np.random.default_rng(s_inr).integers(0, 2**31 - 1, size=3)
        bank = _RayBank(y.geometry, shape=shape)
        prior = ImageGrid(x)
        model = _fresh_inr(cfg, int(event_seeds[0]))
        embed_prior(model, prior, FitConfig(300, cfg.embed_batch, cfg.embed_lr,
                                            seed=int(event_seeds[1])))
        refine_fidelity(model, y, prior, cfg.lam, float(sched.sigma[1]),
                        FitConfig(cfg.refine_iterations, cfg.refine_batch, cfg.refine_lr,
                                  seed=int(event_seeds[2])), ray_bank=bank)
        final = np.clip(render(model, shape).values, 0.0, 1.0)
        trace.add(1, "refine", residual=_residual(final, y),
                  mu=penalty_weight(cfg.lam, float(sched.sigma[1])))
    p = None if ground_truth is None else psnr_metric(
        final, np.asarray(getattr(ground_truth, "values", ground_truth))
    )
    trace.add(0, "final", psnr=p)
    return ImageGrid(final), trace
