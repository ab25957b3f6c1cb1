"""Variance-exploding diffusion: schedule, denoiser training, sampling.

The denoiser is a small time-conditioned convolutional encoder-decoder.
Internally it predicts the negated noise; the public ``score`` divides by
the noise scale, so training reduces to a plain noise-matching loss while
the exposed quantity is the score estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad
from .errors import ScheduleMismatchError, TrainingDivergenceError
from .ndgrad import AdamState, Graph, Tensor, adam_step


@dataclass
class NoiseSchedule:
    """Geometric noise scales sigma_0=sigma_min ... sigma_T=sigma_max."""

    T: int
    sigma_min: float
    sigma_max: float
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("schedule needs T >= 2")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        t = np.arange(self.T + 1) / self.T
        self.sigma = self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def matches(self, other) -> bool:
        return (
            self.T == other.T
            and abs(self.sigma_min - other.sigma_min) < 1e-12
            and abs(self.sigma_max - other.sigma_max) < 1e-12
        )


def ve_schedule(T, sigma_min=0.01, sigma_max=10.0) -> NoiseSchedule:
    return NoiseSchedule(T=int(T), sigma_min=float(sigma_min), sigma_max=float(sigma_max))


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def perturb(x0, t, schedule, seed):
    """VE forward marginal: x_t = x_0 + sigma_t * eps. Returns (x_t, eps)."""
    if not (0 <= t <= schedule.T):
        raise ValueError(f"t={t} outside schedule range [0,{schedule.T}]")
    rng = _as_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    return x0 + schedule.sigma[t] * eps, eps


def time_embedding(t_values, dim=64, T=200):
    """Sinusoidal embedding of integer timesteps, (N, dim)."""
    t = np.atleast_1d(np.asarray(t_values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class ScoreModel:
    """Three-level conv encoder-decoder with additive time conditioning."""

    def __init__(self, schedule: NoiseSchedule, channels=(16, 32, 64), temb_dim=64, seed=0):
        self.schedule = schedule
        self.channels = tuple(int(c) for c in channels)
        self.temb_dim = int(temb_dim)
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([self.seed, 0x5C0E])
        c0, c1, c2 = self.channels

        def conv(name, cin, cout, zero=False):
            std = math.sqrt(2.0 / (cin * 9))
            w = np.zeros((cout, cin, 3, 3), dtype=np.float32) if zero else (
                rng.standard_normal((cout, cin, 3, 3)).astype(np.float32) * std
            )
            self.params[f"{name}_w"] = Tensor(w, requires_grad=True)
            self.params[f"{name}_b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

        def temb_proj(name, cout):
            std = 1.0 / math.sqrt(self.temb_dim)
            w = rng.standard_normal((self.temb_dim, cout)).astype(np.float32) * std
            self.params[f"{name}_w"] = Tensor(w, requires_grad=True)
            self.params[f"{name}_b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

        conv("enc0a", 1, c0)
        conv("enc0b", c0, c0)
        temb_proj("t0", c0)
        conv("enc1a", c0, c1)
        conv("enc1b", c1, c1)
        temb_proj("t1", c1)
        conv("enc2a", c1, c2)
        conv("enc2b", c2, c2)
        temb_proj("t2", c2)
        conv("dec1a", c2 + c1, c1)
        conv("dec1b", c1, c1)
        temb_proj("t3", c1)
        conv("dec0a", c1 + c0, c0)
        conv("dec0b", c0, c0)
        conv("out", c0, 1, zero=True)

    # ---- graph construction -------------------------------------------

    def _p(self, g, name):
        if name in g.leaves:
            return g.leaves[name]
        return g.param(name, self.params[name])

    def _conv(self, g, h, name, act=True):
        h = g.conv2d(h, self._p(g, f"{name}_w"), self._p(g, f"{name}_b"), stride=1, pad=1)
        return g.silu(h) if act else h

    def _temb_bias(self, g, h, temb_node, name):
        b = g.linear(temb_node, self._p(g, f"{name}_w"), self._p(g, f"{name}_b"))
        return g.bias_nc(h, b)

    def build_graph(self, g: Graph, x_node, temb_node):
        """Raw denoiser output (predicts the negated noise)."""
        h = self._conv(g, x_node, "enc0a")
        h = self._temb_bias(g, h, temb_node, "t0")
        e0 = self._conv(g, h, "enc0b")
        h = g.downsample_nn(e0, 2)
        h = self._conv(g, h, "enc1a")
        h = self._temb_bias(g, h, temb_node, "t1")
        e1 = self._conv(g, h, "enc1b")
        h = g.downsample_nn(e1, 2)
        h = self._conv(g, h, "enc2a")
        h = self._temb_bias(g, h, temb_node, "t2")
        h = self._conv(g, h, "enc2b")
        h = g.upsample_nn(h, 2)
        h = g.concat([h, e1], axis=1)
        h = self._conv(g, h, "dec1a")
        h = self._temb_bias(g, h, temb_node, "t3")
        h = self._conv(g, h, "dec1b")
        h = g.upsample_nn(h, 2)
        h = g.concat([h, e0], axis=1)
        h = self._conv(g, h, "dec0a")
        h = self._conv(g, h, "dec0b")
        return self._conv(g, h, "out", act=False)

    # ---- inference ------------------------------------------------------

    def raw(self, x_scaled, t_arr):
        """Raw network output for a pre-scaled (N,1,H,W) batch."""
        g = Graph(dtype=np.float32, check_finite=False)
        x_node = g.input("x", x_scaled.astype(np.float32))
        temb = g.input("temb", time_embedding(t_arr, self.temb_dim, self.schedule.T))
        return self.build_graph(g, x_node, temb).value

    def score(self, x, t):
        """Score estimate s(x, t) matching the input's shape."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        batch = x[None, None] if single else x
        t_arr = np.full(batch.shape[0], int(t))
        sig = self.schedule.sigma[int(t)]
        scaled = batch / math.sqrt(sig**2 + 1.0)
        out = self.raw(scaled, t_arr).astype(np.float64) / sig
        return out[0, 0] if single else out


# ---- training ------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 2e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("TrainConfig fields must be positive")


def _dsm_graph(model: ScoreModel, x0_batch, t_arr, eps):
    """Noise-matching loss graph: mean over batch of sum (raw + eps)^2.

    With the sigma^2(t) weighting of the score-matching objective the
    per-sample sigma factors cancel, leaving pure noise prediction.
    """
    sched = model.schedule
    sig = sched.sigma[t_arr][:, None, None, None]
    x_t = x0_batch + sig * eps
    scaled = (x_t / np.sqrt(sig**2 + 1.0)).astype(np.float32)
    g = Graph(dtype=np.float32, check_finite=False)
    x_node = g.input("x", scaled)
    temb = g.input("temb", time_embedding(t_arr, model.temb_dim, sched.T))
    raw = model.build_graph(g, x_node, temb)
    diff = g.add(raw, g.input("eps", eps.astype(np.float32)))
    loss = g.mul_scalar(g.sum(g.square(diff)), 1.0 / x0_batch.shape[0])
    return g, loss


def dsm_loss(model: ScoreModel, x0_batch, schedule: NoiseSchedule, seed) -> float:
    """Denoising-score-matching loss (sigma^2-weighted) on one batch."""
    if not schedule.matches(model.schedule):
        raise ScheduleMismatchError("loss schedule differs from the model's")
    x0 = np.asarray(x0_batch, dtype=np.float64)
    if x0.ndim == 3:
        x0 = x0[:, None]
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    rng = _as_rng(seed)
    t_arr = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    _, loss = _dsm_graph(model, x0, t_arr, eps)
    return float(loss.value)


def train_score(model: ScoreModel, dataset, cfg: TrainConfig, log=None):
    """Adam-train the denoiser on an (N,H,W) stack of clean images."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 1:
        raise ValueError("dataset must be a nonempty (N,H,W) stack")
    rng = np.random.default_rng([cfg.seed, 0x7A17])
    opt = AdamState(lr=cfg.learning_rate)
    n = data.shape[0]
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x0 = data[idx][:, None]
            t_arr = rng.integers(1, model.schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            g, loss = _dsm_graph(model, x0, t_arr, eps)
            if not np.isfinite(loss.value):
                raise TrainingDivergenceError(f"score training diverged at step {step}")
            grads = g.backward(loss)
            adam_step(model.params, grads, opt)
            if log is not None:
                log.append((epoch, step, float(loss.value)))
            step += 1
    return model


# ---- sampling ---------------------------------------------------------------


def reverse_step(x_t, t, model, schedule: NoiseSchedule, seed):
    """One reverse-SDE update from t to t-1 with a fresh noise draw."""
    if not (1 <= t <= schedule.T):
        raise ValueError(f"t={t} outside [1,{schedule.T}]")
    rng = _as_rng(seed)
    x_t = np.asarray(x_t, dtype=np.float64)
    var = schedule.sigma[t] ** 2 - schedule.sigma[t - 1] ** 2
    s = model.score(x_t, t)
    return x_t + var * s + math.sqrt(max(var, 0.0)) * rng.standard_normal(x_t.shape)


def tweedie_denoise(x_t, t, model, schedule: NoiseSchedule):
    """Posterior-mean denoising: x_t + sigma_t^2 * score. Deterministic."""
    if not (1 <= t <= schedule.T):
        raise ValueError(f"t={t} outside [1,{schedule.T}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    return x_t + schedule.sigma[t] ** 2 * model.score(x_t, t)


def renoise(x_hat, t_target, schedule: NoiseSchedule, seed):
    """Jump back onto the noisy manifold: x_hat + sigma_{t_target} * eps."""
    if not (0 <= t_target <= schedule.T):
        raise ValueError(f"t_target={t_target} outside [0,{schedule.T}]")
    rng = _as_rng(seed)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    return x_hat + schedule.sigma[t_target] * rng.standard_normal(x_hat.shape)


def sample_unconditional(model, schedule: NoiseSchedule, shape, seed):
    """Plain ancestral reverse-SDE sampling from pure noise."""
    rng = _as_rng(seed)
    x = rng.standard_normal(shape) * schedule.sigma[schedule.T]
    for t in range(schedule.T, 0, -1):
        x = reverse_step(x, t, model, schedule, rng)
    return x


# ---- checkpointing ------------------------------------------------------------


def save_score(path, model: ScoreModel):
    tensors = {f"net/{k}": t.data for k, t in model.params.items()}
    tensors["meta/T"] = np.array([model.schedule.T], dtype=np.int64)
    tensors["meta/sigma_min"] = np.array([model.schedule.sigma_min])
    tensors["meta/sigma_max"] = np.array([model.schedule.sigma_max])
    tensors["meta/channels"] = np.array(model.channels, dtype=np.int64)
    tensors["meta/temb_dim"] = np.array([model.temb_dim], dtype=np.int64)
    ndgrad.save_tensors(path, tensors, section="SCR1")


def load_score(path, expect_schedule: NoiseSchedule | None = None) -> ScoreModel:
    tensors, section = ndgrad.load_tensors(path)
    if section != "SCR1":
        raise ValueError(f"{path}: not a score checkpoint (section {section!r})")
    schedule = ve_schedule(
        int(tensors["meta/T"][0]),
        float(tensors["meta/sigma_min"][0]),
        float(tensors["meta/sigma_max"][0]),
    )
    if expect_schedule is not None and not schedule.matches(expect_schedule):
        raise ScheduleMismatchError(
            f"checkpoint schedule (T={schedule.T}, {schedule.sigma_min}..{schedule.sigma_max}) "
            f"does not match requested (T={expect_schedule.T}, "
            f"{expect_schedule.sigma_min}..{expect_schedule.sigma_max})"
        )
    model = ScoreModel(
        schedule,
        channels=tuple(tensors["meta/channels"].tolist()),
        temb_dim=int(tensors["meta/temb_dim"][0]),
    )
    for k, t in model.params.items():
        t.data = tensors[f"net/{k}"].astype(np.float32)
    return model
