"""Coordinate-network image representation.

Two fitting stages: embedding a prior image into the network weights
(L2 on sampled pixel centers), then refining those weights against
measured projections (L1 on ray integrals plus a noise-level-weighted
consistency pull toward the prior).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .errors import TrainingDivergenceError
from .ndgrad import AdamState, Graph, Tensor, adam_step
from .tomo import ImageGrid, Sinogram, pixel_centers, ray_midpoints

MU_MAX = 1e4


def penalty_weight(lam, sigma_t):
    """Consistency weight lam/(2 sigma_t^2), capped so float32 stays sane."""
    if sigma_t <= 0:
        raise ValueError("sigma_t must be positive")
    if lam <= 0:
        raise ValueError("lam must be positive")
    return min(lam / (2.0 * sigma_t**2), MU_MAX)


@dataclass
class FitConfig:
    iterations: int
    batch_size: int
    learning_rate: float
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("FitConfig fields must be positive")


def default_embed_cfg(seed=0) -> FitConfig:
    """Cold-start embedding default; warm-started loops use far fewer."""
    return FitConfig(iterations=300, batch_size=1000, learning_rate=1e-3, seed=seed)


def default_refine_cfg(seed=0) -> FitConfig:
    return FitConfig(iterations=250, batch_size=128, learning_rate=1e-4, seed=seed)


class FourierEncoding:
    """Random Fourier features: p -> [sin(2 pi B p), cos(2 pi B p)]."""

    def __init__(self, num_features=64, bandwidth=3.0, seed=0):
        if num_features < 16:
            raise ValueError("num_features must be >= 16")
        self.num_features = int(num_features)
        self.bandwidth = float(bandwidth)
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0xF0F0])
        self.matrix = (rng.standard_normal((self.num_features, 2)) * bandwidth).astype(np.float32)

    @property
    def out_dim(self):
        return 2 * self.num_features

    def encode(self, points):
        proj = (2.0 * np.pi) * np.asarray(points, dtype=np.float32) @ self.matrix.T
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


class INRModel:
    """Fourier encoding feeding a ReLU MLP with a linear scalar output."""

    def __init__(self, encoding=None, hidden=(96, 96, 96), seed=0):
        self.encoding = encoding if encoding is not None else FourierEncoding(seed=seed)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0x1A2B])
        self.params: dict[str, Tensor] = {}
        sizes = [self.encoding.out_dim, *self.hidden, 1]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = math.sqrt(2.0 / fan_in)
            w = rng.standard_normal((fan_in, fan_out)).astype(np.float32) * std
            b = np.zeros(fan_out, dtype=np.float32)
            if i == len(sizes) - 2:
                w *= 0.01
                b += 0.5  # start near mid-intensity so fits converge quickly
            self.params[f"w{i}"] = Tensor(w, requires_grad=True)
            self.params[f"b{i}"] = Tensor(b, requires_grad=True)
        self.n_layers = len(sizes) - 1

    def mlp_graph(self, g: Graph, feats_node):
        h = feats_node
        for i in range(self.n_layers):
            w = g.param(f"w{i}", self.params[f"w{i}"])
            b = g.param(f"b{i}", self.params[f"b{i}"])
            h = g.linear(h, w, b)
            if i < self.n_layers - 1:
                h = g.relu(h)
        return g.reshape(h, (h.value.shape[0],))

    def forward(self, points):
        """Intensities at (M,2) coordinates; zero outside [-1,1]^2."""
        pts = np.asarray(points, dtype=np.float64)
        feats = self.encoding.encode(pts)
        g = Graph(dtype=np.float32)
        out = self.mlp_graph(g, g.input("feats", feats))
        vals = out.value.astype(np.float64)
        inside = np.all(np.abs(pts) <= 1.0, axis=1)
        return vals * inside


def render(model: INRModel, grid_shape, clamp=False) -> ImageGrid:
    """Evaluate the model at pixel centers of the target grid."""
    pts = pixel_centers(grid_shape)
    vals = np.empty(pts.shape[0])
    chunk = 16384
    for start in range(0, pts.shape[0], chunk):
        vals[start : start + chunk] = model.forward(pts[start : start + chunk])
    img = vals.reshape(grid_shape)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return ImageGrid(img)


def embed_prior(model: INRModel, prior: ImageGrid, cfg: FitConfig) -> INRModel:
    """Fit the network to the prior image by sampled-pixel L2 regression."""
    feats_all = model.encoding.encode(pixel_centers(prior.shape))
    targets_all = prior.values.reshape(-1).astype(np.float32)
    n_pix = targets_all.shape[0]
    rng = np.random.default_rng([cfg.seed, 0xE3BD])
    opt = AdamState(lr=cfg.learning_rate)
    for it in range(cfg.iterations):
        idx = rng.integers(0, n_pix, size=cfg.batch_size)
        g = Graph(dtype=np.float32, check_finite=False)
        pred = model.mlp_graph(g, g.input("feats", feats_all[idx]))
        target = g.input("target", targets_all[idx])
        loss = g.mean(g.square(g.sub(pred, target)))
        if not np.isfinite(loss.value):
            raise TrainingDivergenceError(f"prior embedding diverged at iteration {it}")
        grads = g.backward(loss)
        adam_step(model.params, grads, opt)
    return model


class _RayBank:
    """Precomputed ray sampling against a fixed render grid.

    Midpoint samples at spacing dp are expressed through their bilinear
    footprint on the grid's pixels, so integrating the network's rendered
    grid reproduces the measurement operator exactly (no sampling-phase
    mismatch against sinograms produced by project_grid).
    """

    def __init__(self, geom, shape=None, dp=None):
        from .tomo import _angle_vectors, _clip_span, bilinear_weights

        self.dp = float(dp if dp is not None else geom.ray_step)
        self.shape = tuple(shape) if shape is not None else (geom.detector_bins, geom.detector_bins)
        rho = geom.bin_centers()
        pts_parts = []
        counts = []
        for theta in geom.angles:
            normal, direction = _angle_vectors(theta)
            origins = rho[:, None] * normal[None, :]
            entry, exit_ = _clip_span(origins, direction)
            pts, mask, nsamp = ray_midpoints(origins, direction, entry, exit_, self.dp)
            for b in range(len(rho)):
                pts_parts.append(pts[b, : nsamp[b]])
            counts.append(nsamp)
        self.counts = np.concatenate(counts)
        self.offsets = np.zeros(len(self.counts) + 1, dtype=np.int64)
        np.cumsum(self.counts, out=self.offsets[1:])
        self.points = np.concatenate(pts_parts, axis=0)
        idx, wgt = bilinear_weights(self.points, self.shape)
        self.pix_idx = idx
        self.pix_wgt = wgt.astype(np.float32)

    def _span_select(self, ray_idx):
        counts = self.counts[ray_idx]
        total = int(counts.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64), counts
        # vectorized concatenation of [start_i, start_i + count_i) index ranges
        nz = counts > 0
        span_starts = self.offsets[ray_idx][nz]
        span_counts = counts[nz]
        steps = np.ones(total, dtype=np.int64)
        boundaries = np.concatenate([[0], np.cumsum(span_counts)[:-1]])
        steps[boundaries[0]] = span_starts[0]
        steps[boundaries[1:]] = span_starts[1:] - (span_starts[:-1] + span_counts[:-1]) + 1
        sel = np.cumsum(steps)
        return sel, counts

    def gather(self, ray_idx):
        """(points, per-ray counts) for the selected ray indices."""
        sel, counts = self._span_select(ray_idx)
        return self.points[sel], counts

    def gather_bilinear(self, ray_idx):
        """(pixel indices (4,M), weights (4,M), counts) for selected rays."""
        sel, counts = self._span_select(ray_idx)
        return self.pix_idx[:, sel], self.pix_wgt[:, sel], counts


def refine_fidelity(model: INRModel, y: Sinogram, prior: ImageGrid, lam, sigma_t,
                    cfg: FitConfig, consistency_batch=1000, ray_bank=None) -> INRModel:
    """Refine an embedded model against measured ray integrals.

    Loss per iteration: mean absolute projection residual over a random
    ray batch plus mu * mean squared deviation from the prior on a fresh
    coordinate batch, mu = penalty_weight(lam, sigma_t).
    """
    mu = penalty_weight(lam, sigma_t)
    bank = ray_bank if ray_bank is not None else _RayBank(y.geometry, shape=prior.shape)
    targets = y.values.reshape(-1).astype(np.float32)
    usable = np.flatnonzero(bank.counts > 0)
    if usable.size == 0:
        raise ValueError("refine_fidelity: no rays intersect the support")
    feats_pix = model.encoding.encode(pixel_centers(bank.shape))
    prior_flat = prior.values.reshape(-1).astype(np.float32)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    opt = AdamState(lr=cfg.learning_rate)
    for it in range(cfg.iterations):
        ray_idx = usable[rng.integers(0, usable.size, size=cfg.batch_size)]
        idx4, wgt4, counts = bank.gather_bilinear(ray_idx)
        pix_idx = rng.integers(0, prior_flat.size, size=consistency_batch)

        g = Graph(dtype=np.float32, check_finite=False)
        pred = model.mlp_graph(g, g.input("feats", feats_pix))
        line_vals = g.gather_weighted(pred, idx4, wgt4)
        sums = g.mul_scalar(g.segment_sum(line_vals, counts), bank.dp)
        data_term = g.mean(g.abs(g.sub(sums, g.input("y", targets[ray_idx]))))
        pred_pix = g.gather_weighted(pred, pix_idx[None, :], np.ones((1, consistency_batch)))
        cons = g.mean(g.square(g.sub(pred_pix, g.input("prior", prior_flat[pix_idx]))))
        loss = g.add(data_term, g.mul_scalar(cons, mu))
        if not np.isfinite(loss.value):
            raise TrainingDivergenceError(f"fidelity refinement diverged at iteration {it}")
        grads = g.backward(loss)
        adam_step(model.params, grads, opt)
    return model


def fit_to_sinogram(model: INRModel, y: Sinogram, cfg: FitConfig, ray_bank=None) -> INRModel:
    """Plain measurement fit: L1 ray-integral loss only (no prior pull)."""
    bank = ray_bank if ray_bank is not None else _RayBank(y.geometry)
    targets = y.values.reshape(-1).astype(np.float32)
    usable = np.flatnonzero(bank.counts > 0)
    if usable.size == 0:
        raise ValueError("fit_to_sinogram: no rays intersect the support")
    feats_pix = model.encoding.encode(pixel_centers(bank.shape))
    rng = np.random.default_rng([cfg.seed, 0xF17])
    opt = AdamState(lr=cfg.learning_rate)
    for it in range(cfg.iterations):
        ray_idx = usable[rng.integers(0, usable.size, size=cfg.batch_size)]
        idx4, wgt4, counts = bank.gather_bilinear(ray_idx)
        g = Graph(dtype=np.float32, check_finite=False)
        pred = model.mlp_graph(g, g.input("feats", feats_pix))
        line_vals = g.gather_weighted(pred, idx4, wgt4)
        sums = g.mul_scalar(g.segment_sum(line_vals, counts), bank.dp)
        loss = g.mean(g.abs(g.sub(sums, g.input("y", targets[ray_idx]))))
        if not np.isfinite(loss.value):
            raise TrainingDivergenceError(f"sinogram fit diverged at iteration {it}")
        grads = g.backward(loss)
        adam_step(model.params, grads, opt)
    return model


# ---- checkpointing -----------------------------------------------------------


def save_inr(path, model: INRModel):
    tensors = {f"mlp/{k}": t.data for k, t in model.params.items()}
    tensors["meta/enc_seed"] = np.array([model.encoding.seed], dtype=np.int64)
    tensors["meta/enc_features"] = np.array([model.encoding.num_features], dtype=np.int64)
    tensors["meta/bandwidth"] = np.array([model.encoding.bandwidth])
    tensors["meta/hidden"] = np.array(model.hidden, dtype=np.int64)
    ndgrad.save_tensors(path, tensors, section="INR1")


def load_inr(path) -> INRModel:
    tensors, section = ndgrad.load_tensors(path)
    if section != "INR1":
        raise ValueError(f"{path}: not an INR checkpoint (section {section!r})")
    enc = FourierEncoding(
        num_features=int(tensors["meta/enc_features"][0]),
        bandwidth=float(tensors["meta/bandwidth"][0]),
        seed=int(tensors["meta/enc_seed"][0]),
    )
    model = INRModel(encoding=enc, hidden=tuple(tensors["meta/hidden"].tolist()))
    for k, t in model.params.items():
        t.data = tensors[f"mlp/{k}"].astype(np.float32)
    return model
