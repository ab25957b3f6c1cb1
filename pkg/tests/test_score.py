import numpy as np
import pytest

from tomoprior.errors import ScheduleMismatchError
from tomoprior.score import (
    NoiseSchedule,
    ScoreModel,
    TrainConfig,
    dsm_loss,
    load_score,
    perturb,
    renoise,
    reverse_step,
    save_score,
    train_score,
    tweedie_denoise,
    ve_schedule,
)


class GaussianScore:
    """Analytic score of data ~ N(mean, tau^2 I) under VE noising."""

    def __init__(self, mean, tau, schedule):
        self.mean = mean
        self.tau = tau
        self.schedule = schedule

    def score(self, x, t):
        var = self.tau**2 + self.schedule.sigma[int(t)] ** 2
        return -(np.asarray(x, dtype=np.float64) - self.mean) / var


class ZeroScore:
    def score(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


class OracleNoiseScore:
    """Injects exactly -eps/sigma_t, the per-sample DSM optimum."""

    def __init__(self, schedule):
        self.schedule = schedule


# ---- schedule -----------------------------------------------------------------


def test_ve_schedule_endpoints_and_monotone():
    s = ve_schedule(200, 0.01, 10.0)
    assert s.sigma[0] == pytest.approx(0.01, rel=1e-12)
    assert s.sigma[200] == pytest.approx(10.0, rel=1e-12)
    assert np.all(np.diff(s.sigma) > 0)
    assert len(s.sigma) == 201


def test_ve_schedule_geometric():
    s = ve_schedule(10, 0.1, 1.0)
    ratios = s.sigma[1:] / s.sigma[:-1]
    assert np.allclose(ratios, ratios[0])


def test_ve_schedule_validation():
    with pytest.raises(ValueError):
        ve_schedule(1, 0.01, 10.0)
    with pytest.raises(ValueError):
        ve_schedule(10, 1.0, 0.5)


# ---- perturb ---------------------------------------------------------------------


def test_perturb_t0_is_near_identity():
    s = ve_schedule(100, 0.001, 1.0)
    x0 = np.zeros((16, 16))
    xt, eps = perturb(x0, 0, s, seed=0)
    assert np.max(np.abs(xt)) < 0.01


def test_perturb_variance():
    s = ve_schedule(100, 0.01, 10.0)
    x0 = np.zeros((400, 400))
    t = 50
    xt, eps = perturb(x0, t, s, seed=1)
    sample_var = float(np.var(xt))
    assert abs(sample_var - s.sigma[t] ** 2) / s.sigma[t] ** 2 < 0.05
    assert np.array_equal(xt, x0 + s.sigma[t] * eps)


def test_perturb_reproducible():
    s = ve_schedule(100, 0.01, 10.0)
    x0 = np.ones((8, 8))
    a, _ = perturb(x0, 10, s, seed=42)
    b, _ = perturb(x0, 10, s, seed=42)
    assert np.array_equal(a, b)


# ---- tweedie / reverse step --------------------------------------------------------


def test_tweedie_zero_score_is_identity():
    s = ve_schedule(100, 0.01, 10.0)
    x = np.random.default_rng(0).standard_normal((12, 12))
    out = tweedie_denoise(x, 50, ZeroScore(), s)
    assert np.array_equal(out, x)


def test_tweedie_matches_conjugate_gaussian_posterior_mean():
    s = ve_schedule(100, 0.01, 10.0)
    rng = np.random.default_rng(1)
    mean = 0.3
    tau = 0.5
    oracle = GaussianScore(mean, tau, s)
    for t in (10, 50, 90):
        x = rng.standard_normal((16, 16)) * 2.0 + mean
        sig2 = s.sigma[t] ** 2
        expected = (tau**2 * x + sig2 * mean) / (tau**2 + sig2)
        got = tweedie_denoise(x, t, oracle, s)
        assert np.max(np.abs(got - expected)) < 1e-6


def test_reverse_step_degenerate_schedule_identity():
    # equal consecutive sigmas: both coefficients vanish
    s = ve_schedule(10, 0.01, 10.0)
    s.sigma[4] = s.sigma[5]
    x = np.random.default_rng(2).standard_normal((8, 8))
    out = reverse_step(x, 5, ZeroScore(), s, seed=0)
    assert np.allclose(out, x)


def test_reverse_step_zero_score_pure_noise_variance():
    s = ve_schedule(100, 0.01, 10.0)
    t = 80
    x = np.zeros((300, 300))
    out = reverse_step(x, t, ZeroScore(), s, seed=3)
    var = s.sigma[t] ** 2 - s.sigma[t - 1] ** 2
    assert abs(float(np.var(out)) - var) / var < 0.05


def test_reverse_step_moves_toward_gaussian_mean():
    # analytic-score oracle: a step must decrease distance to the blob
    # mean in expectation
    s = ve_schedule(100, 0.01, 10.0)
    mean = 2.0
    oracle = GaussianScore(mean, 0.1, s)
    rng = np.random.default_rng(4)
    t = 90
    before_total, after_total = 0.0, 0.0
    for trial in range(1000):
        x = mean + s.sigma[t] * rng.standard_normal((4, 4))
        moved = reverse_step(x, t, oracle, s, seed=rng)
        before_total += float(np.mean(np.abs(x - mean)))
        after_total += float(np.mean(np.abs(moved - mean)))
    assert after_total < before_total


# ---- renoise ------------------------------------------------------------------------


def test_renoise_t0_near_identity():
    s = ve_schedule(200, 0.01, 10.0)
    x = np.full((32, 32), 0.5)
    out = renoise(x, 0, s, seed=5)
    assert np.sqrt(np.mean((out - x) ** 2)) < 0.02


def test_renoise_variance():
    s = ve_schedule(200, 0.01, 10.0)
    x = np.zeros((300, 300))
    out = renoise(x, 120, s, seed=6)
    sig2 = s.sigma[120] ** 2
    assert abs(float(np.var(out)) - sig2) / sig2 < 0.05


def test_renoise_after_tweedie_variance():
    # renoise(tweedie(x_t,t), t) has marginal variance sigma_t^2 around x0|t
    s = ve_schedule(200, 0.01, 10.0)
    x0t = np.full((300, 300), 0.25)
    out = renoise(x0t, 100, s, seed=7)
    sig2 = s.sigma[100] ** 2
    assert abs(float(np.var(out - x0t)) - sig2) / sig2 < 0.05


# ---- dsm loss -------------------------------------------------------------------------


def test_dsm_loss_untrained_equals_zero_predictor():
    # the output conv starts zero-initialized, so the raw net is the zero
    # predictor and the loss must equal E||eps||^2 = H*W (within factor 4
    # by the spec bound; exact-ish here by construction)
    s = ve_schedule(50, 0.01, 10.0)
    model = ScoreModel(s, channels=(4, 8, 8), seed=0)
    rng = np.random.default_rng(8)
    batch = rng.random((4, 16, 16))
    loss = dsm_loss(model, batch, s, seed=9)
    assert 16 * 16 / 4 <= loss <= 16 * 16 * 4


def test_dsm_loss_oracle_model_zero():
    # with raw output equal to -eps the loss vanishes; emulate by building
    # the graph pieces directly through a stub whose raw() returns -eps.
    s = ve_schedule(50, 0.01, 10.0)

    # direct expression-level check of the objective's minimum:
    # sigma^2 * ||(-eps/sigma) + eps/sigma||^2 == 0
    eps = np.random.default_rng(10).standard_normal((2, 1, 8, 8))
    for t in (1, 25, 50):
        sig = s.sigma[t]
        s_theta = -eps / sig
        val = sig**2 * np.sum((s_theta + eps / sig) ** 2)
        assert val == 0.0


def test_dsm_loss_empty_batch_rejected():
    s = ve_schedule(50, 0.01, 10.0)
    model = ScoreModel(s, channels=(4, 8, 8), seed=0)
    with pytest.raises(ValueError):
        dsm_loss(model, np.zeros((0, 16, 16)), s, seed=0)


def test_dsm_loss_schedule_mismatch():
    s1 = ve_schedule(50, 0.01, 10.0)
    s2 = ve_schedule(60, 0.01, 10.0)
    model = ScoreModel(s1, channels=(4, 8, 8), seed=0)
    with pytest.raises(ScheduleMismatchError):
        dsm_loss(model, np.zeros((2, 16, 16)), s2, seed=0)


def test_training_step_reduces_loss_tiny_net():
    s = ve_schedule(20, 0.01, 5.0)
    model = ScoreModel(s, channels=(4, 8, 8), seed=1)
    rng = np.random.default_rng(11)
    data = rng.random((32, 16, 16)) * 0.5
    before = np.mean([dsm_loss(model, data[i : i + 8], s, seed=k) for k, i in enumerate(range(0, 32, 8))])
    train_score(model, data, TrainConfig(epochs=3, batch_size=8, learning_rate=1e-3, seed=2))
    after = np.mean([dsm_loss(model, data[i : i + 8], s, seed=k) for k, i in enumerate(range(0, 32, 8))])
    assert after < before


def test_train_deterministic_same_seed():
    s = ve_schedule(20, 0.01, 5.0)
    rng = np.random.default_rng(12)
    data = rng.random((16, 16, 16))

    def run():
        m = ScoreModel(s, channels=(4, 8, 8), seed=3)
        train_score(m, data, TrainConfig(epochs=1, batch_size=8, learning_rate=1e-3, seed=4))
        return np.concatenate([t.data.reshape(-1) for _, t in sorted(m.params.items())])

    a, b = run(), run()
    assert np.array_equal(a, b)


# ---- checkpoint ---------------------------------------------------------------------


def test_score_checkpoint_roundtrip(tmp_path):
    s = ve_schedule(30, 0.02, 8.0)
    model = ScoreModel(s, channels=(4, 8, 8), seed=5)
    p = tmp_path / "score.ndg"
    save_score(p, model)
    again = load_score(p)
    assert again.schedule.matches(s)
    for k in model.params:
        assert np.array_equal(again.params[k].data, model.params[k].data)
    x = np.random.default_rng(13).standard_normal((16, 16))
    assert np.array_equal(model.score(x, 10), again.score(x, 10))


def test_score_checkpoint_schedule_mismatch(tmp_path):
    s = ve_schedule(30, 0.02, 8.0)
    model = ScoreModel(s, channels=(4, 8, 8), seed=5)
    p = tmp_path / "score.ndg"
    save_score(p, model)
    with pytest.raises(ScheduleMismatchError):
        load_score(p, expect_schedule=ve_schedule(40, 0.02, 8.0))


def test_score_model_finite_on_wide_inputs():
    s = ve_schedule(30, 0.01, 10.0)
    model = ScoreModel(s, channels=(4, 8, 8), seed=6)
    x = np.random.default_rng(14).uniform(-30, 30, (16, 16))
    out = model.score(x, 30)
    assert np.all(np.isfinite(out))
    assert out.shape == x.shape
