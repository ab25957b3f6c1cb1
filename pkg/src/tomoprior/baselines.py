"""Classical comparison reconstructors: SART, ADMM with anisotropic TV,
and a plain measurement-fit coordinate network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inr import FitConfig, FourierEncoding, INRModel, _RayBank, fit_to_sinogram, render
from .tomo import (
    ImageGrid,
    Sinogram,
    _angle_vectors,
    _clip_span,
    backproject_to,
    bilinear_weights,
    project_grid,
    ray_midpoints,
)


@dataclass
class SartConfig:
    iterations: int = 20
    relaxation: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not (0 < self.relaxation < 2):
            raise ValueError("relaxation must lie in (0,2)")


@dataclass
class AdmmTvConfig:
    tv_weight: float = 3e-4
    rho: float = 1.0
    outer_iterations: int = 20
    cg_iterations: int = 50
    cg_tol: float = 1e-6

    def __post_init__(self):
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be nonnegative")
        if min(self.rho, self.outer_iterations, self.cg_iterations) <= 0:
            raise ValueError("AdmmTvConfig fields must be positive")


class _ViewOps:
    """Cached single-view projector/adjoint pairs for row-action methods."""

    def __init__(self, geom, shape):
        self.shape = shape
        self.n_bins = geom.detector_bins
        self.views = []
        rho = geom.bin_centers()
        dp = geom.ray_step
        for theta in geom.angles:
            normal, direction = _angle_vectors(theta)
            origins = rho[:, None] * normal[None, :]
            entry, exit_ = _clip_span(origins, direction)
            pts, mask, _ = ray_midpoints(origins, direction, entry, exit_, dp)
            idx, wgt = bilinear_weights(pts, shape)
            wgt = wgt * mask.reshape(-1)[None, :] * dp
            self.views.append((idx, wgt, pts.shape[1]))
        self.n_pix = shape[0] * shape[1]

    def project(self, x_flat, vi):
        idx, wgt, k = self.views[vi]
        if k == 0:
            return np.zeros(self.n_bins)
        vals = (x_flat[idx] * wgt).sum(axis=0)
        return vals.reshape(self.n_bins, k).sum(axis=1)

    def backproject(self, row, vi):
        idx, wgt, k = self.views[vi]
        out = np.zeros(self.n_pix)
        if k == 0:
            return out
        contrib = np.repeat(row, k)
        for c in range(4):
            out += np.bincount(idx[c], weights=wgt[c] * contrib, minlength=self.n_pix)
        return out


def sart(y: Sinogram, cfg: SartConfig, shape=None) -> ImageGrid:
    """Per-view additive updates with row/column normalization.

    Views sweep in ascending angle order; nonnegativity is enforced after
    each full sweep. Zero iterations returns the zero initialization.
    """
    geom = y.geometry
    if shape is None:
        shape = (geom.detector_bins, geom.detector_bins)
    ops = _ViewOps(geom, shape)
    eps = 1e-8
    ones_img = np.ones(ops.n_pix)
    row_norms = [np.maximum(ops.project(ones_img, vi), eps) for vi in range(geom.n_views)]
    col_norms = [
        np.maximum(ops.backproject(np.ones(geom.detector_bins), vi), eps)
        for vi in range(geom.n_views)
    ]
    x = np.zeros(ops.n_pix)
    for _ in range(cfg.iterations):
        for vi in range(geom.n_views):
            resid = (y.values[vi] - ops.project(x, vi)) / row_norms[vi]
            x += cfg.relaxation * ops.backproject(resid, vi) / col_norms[vi]
        np.maximum(x, 0.0, out=x)
    return ImageGrid(x.reshape(shape))


# ---- anisotropic TV pieces ---------------------------------------------------


def _grad_ops(shape):
    h, w = shape

    def D(x):
        img = x.reshape(shape)
        dx = img[:, 1:] - img[:, :-1]
        dy = img[1:, :] - img[:-1, :]
        return np.concatenate([dx.reshape(-1), dy.reshape(-1)])

    def Dt(z):
        nx = h * (w - 1)
        dx = z[:nx].reshape(h, w - 1)
        dy = z[nx:].reshape(h - 1, w)
        out = np.zeros(shape)
        out[:, :-1] -= dx
        out[:, 1:] += dx
        out[:-1, :] -= dy
        out[1:, :] += dy
        return out.reshape(-1)

    return D, Dt


def _soft_threshold(v, thr):
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


@dataclass
class AdmmTvInfo:
    cg_warnings: int = 0
    objective: list = field(default_factory=list)
    data_residual: list = field(default_factory=list)


def admm_tv(y: Sinogram, cfg: AdmmTvConfig, shape=None):
    """ADMM for 0.5*||Ax-y||^2 + w*TV_aniso(x).

    x-update solves (A^T A + rho D^T D) x = A^T y + rho D^T (z - u) by
    conjugate gradient (warm-started); z-update is the elementwise soft
    threshold at w/rho. Returns (image, info) where info flags CG
    non-convergence.
    """
    geom = y.geometry
    if shape is None:
        shape = (geom.detector_bins, geom.detector_bins)
    D, Dt = _grad_ops(shape)

    def A(x_flat):
        return project_grid(ImageGrid(x_flat.reshape(shape)), geom).values.reshape(-1)

    def At(r_flat):
        return backproject_to(Sinogram(r_flat.reshape(y.values.shape), geom), shape).values.reshape(-1)

    def normal_op(v):
        return At(A(v)) + cfg.rho * Dt(D(v))

    y_flat = y.values.reshape(-1)
    aty = At(y_flat)
    n = shape[0] * shape[1]
    x = np.zeros(n)
    z = D(x)
    u = np.zeros_like(z)
    info = AdmmTvInfo()
    for _ in range(cfg.outer_iterations):
        rhs = aty + cfg.rho * Dt(z - u)
        x, converged = _cg(normal_op, rhs, x, cfg.cg_iterations, cfg.cg_tol)
        if not converged:
            info.cg_warnings += 1
        dx = D(x)
        z = _soft_threshold(dx + u, cfg.tv_weight / cfg.rho)
        u = u + dx - z
        resid = A(x) - y_flat
        info.data_residual.append(float(np.linalg.norm(resid)))
        info.objective.append(0.5 * float(resid @ resid) + cfg.tv_weight * float(np.abs(dx).sum()))
    return ImageGrid(x.reshape(shape)), info


def _cg(op, b, x0, max_iter, tol):
    x = x0.copy()
    r = b - op(x)
    p = r.copy()
    rs = float(r @ r)
    bnorm = float(np.linalg.norm(b)) + 1e-30
    for _ in range(max_iter):
        if np.sqrt(rs) / bnorm < tol:
            return x, True
        ap = op(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, np.sqrt(rs) / bnorm < tol


# ---- plain coordinate-network fit ---------------------------------------------


DEFAULT_INR_STAGES = ((2000, 1e-3), (1000, 3e-4), (1000, 1e-4))


def inr_only(y: Sinogram, cfg: FitConfig | None = None, seed=0, stages=None,
             hidden=(96, 96, 96), num_features=64, bandwidth=3.0, ray_bank=None) -> ImageGrid:
    """Measurement-only coordinate-network reconstruction (no prior pull).

    Fits with the absolute-residual projection loss in decaying-rate
    stages; ``cfg`` overrides the stage schedule with a single stage.
    """
    enc = FourierEncoding(num_features=num_features, bandwidth=bandwidth, seed=seed)
    model = INRModel(encoding=enc, hidden=hidden, seed=seed)
    bank = ray_bank if ray_bank is not None else _RayBank(y.geometry)
    if cfg is not None:
        schedule = ((cfg.iterations, cfg.learning_rate),)
        batch = cfg.batch_size
        base_seed = cfg.seed
    else:
        schedule = stages if stages is not None else DEFAULT_INR_STAGES
        batch = 128
        base_seed = seed
    for si, (iters, lr) in enumerate(schedule):
        fit_to_sinogram(model, y, FitConfig(iters, batch, lr, seed=base_seed + 31 * si), ray_bank=bank)
    shape = (y.geometry.detector_bins, y.geometry.detector_bins)
    return render(model, shape, clamp=True)
