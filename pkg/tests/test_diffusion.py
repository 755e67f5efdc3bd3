import csv

import numpy as np
import pytest

from nsdd.diffusion import (DenoiserPrior, GaussianPrior, ancestral_step, denoiser_mse,
                            denoiser_network, load_denoiser, make_schedule,
                            posterior_mean_estimate, q_sample, sample_unconditional,
                            save_denoiser, train_denoiser)
from nsdd.errors import ParameterError
from nsdd.micro_net import AdamState
from nsdd.tensor_io import SeededRng


def test_long_schedule_reaches_noise():
    s = make_schedule("linear_beta", 1000, 1e-4, 0.02)
    assert s.alpha_bar[1000] < 1e-3


def test_single_step_schedule():
    s = make_schedule(T=1, beta_min=0.3, beta_max=0.3)
    assert s.alpha_bar[1] == pytest.approx(0.7, abs=1e-15)
    assert s.a[1] == pytest.approx(1.0) and s.posterior_variance[1] == 0.0


@pytest.mark.parametrize("T", [1, 10, 100, 1000])
def test_schedule_invariants(T):
    s = make_schedule(T=T)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    assert np.all(np.isfinite(s.a[1:]))
    assert np.allclose(s.sigma_marginal ** 2, 1 - s.alpha_bar)


def test_posterior_coefficients_consistent():
    # noiseless chain from x0 = 1: the posterior mean must land on sqrt(ab_{t-1})
    s = make_schedule(T=50)
    for t in range(2, 51):
        ab, ab_prev = s.alpha_bar[t], s.alpha_bar[t - 1]
        assert s.a[t] * 1.0 + s.b[t] * np.sqrt(ab) == pytest.approx(np.sqrt(ab_prev), rel=1e-12)


@pytest.mark.parametrize("lo,hi", [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)])
def test_bad_schedule(lo, hi):
    with pytest.raises(ParameterError):
        make_schedule(T=10, beta_min=lo, beta_max=hi)


def test_gaussian_posterior_mean_is_rescale():
    s = make_schedule(T=100)
    prior = GaussianPrior(0.0, 1.0)
    x = SeededRng(0).normal((4, 4, 1))
    for t in range(1, 101):
        assert np.max(np.abs(posterior_mean_estimate(prior, s, x, t) - np.sqrt(s.alpha_bar[t]) * x)) < 1e-10


def test_degenerate_prior_returns_mean():
    s = make_schedule(T=100)
    prior = GaussianPrior(0.3, 0.0)
    x = SeededRng(1).normal((3, 3, 1)) * 10
    for t in (1, 50, 100):
        assert np.allclose(posterior_mean_estimate(prior, s, x, t), 0.3, atol=1e-12)


def test_out_of_range_timestep():
    with pytest.raises(ParameterError):
        posterior_mean_estimate(GaussianPrior(), make_schedule(T=10), np.zeros((1, 1, 1)), 0)


class _ScoreOnly(DenoiserPrior):
    def __init__(self, g):
        self.g = g

    def score(self, x_t, t, sched):
        return self.g.score(x_t, t, sched)


class _MeanOnly(DenoiserPrior):
    def __init__(self, g):
        self.g = g

    def posterior_mean(self, x_t, t, sched):
        return self.g.posterior_mean(x_t, t, sched)


def test_score_mean_conversion():
    s = make_schedule(T=100)
    g = GaussianPrior(0.4, 0.25)
    x = SeededRng(2).normal((4, 4, 1))
    for t in (1, 37, 100):
        assert np.max(np.abs(_ScoreOnly(g).posterior_mean(x, t, s) - g.posterior_mean(x, t, s))) < 1e-10
        assert np.max(np.abs(_MeanOnly(g).score(x, t, s) - g.score(x, t, s))) < 1e-10


def test_monte_carlo_conditional_mean():
    s = make_schedule(T=100)
    t = 40
    prior = GaussianPrior(0.5, 0.3)
    rng = SeededRng(3)
    n = 100_000
    x0 = 0.5 + np.sqrt(0.3) * rng.normal(n)
    xt = q_sample(s, x0, t, rng.normal(n))
    for centre in (-0.5, 0.2, 0.9):
        sel = np.abs(xt - centre) < 0.02
        est = x0[sel].mean()
        se = x0[sel].std() / np.sqrt(sel.sum())
        pred = prior.posterior_mean(np.array([centre]), t, s)[0]
        assert abs(est - pred) < 3 * se + 0.02 * prior.gain(t, s)


def test_forward_noising_variance():
    s = make_schedule(T=100)
    rng = SeededRng(4)
    n, v0 = 100_000, 0.5
    for t in (10, 90):
        xt = q_sample(s, np.sqrt(v0) * rng.normal(n), t, rng.normal(n))
        expected = s.alpha_bar[t] * v0 + 1 - s.alpha_bar[t]
        se = expected * np.sqrt(2 / (n - 1))
        assert abs(xt.var(ddof=1) - expected) < 3 * se


def test_zero_variance_step_is_deterministic():
    s = make_schedule(T=20)
    x, x0 = SeededRng(5).normal((3, 3, 1)), SeededRng(6).normal((3, 3, 1))
    a = ancestral_step(s, x, x0, 7, SeededRng(1), extra_variance=0.0)
    b = ancestral_step(s, x, x0, 7, SeededRng(2), extra_variance=0.0)
    assert np.array_equal(a, b)


def test_final_step_returns_estimate():
    s = make_schedule(T=20)
    x, x0 = SeededRng(5).normal((3, 3, 1)), SeededRng(6).normal((3, 3, 1))
    assert np.allclose(ancestral_step(s, x, x0, 1, SeededRng(0), extra_variance=0.0), x0, atol=1e-12)


def test_negative_variance_rejected():
    s = make_schedule(T=20)
    with pytest.raises(ParameterError):
        ancestral_step(s, np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), 3, SeededRng(0), extra_variance=-1e-9)


def test_unconditional_sampling_recovers_prior():
    # 1000 steps: the small-variance reverse kernel loses ~1% of the prior variance, below 3 SE
    s = make_schedule(T=1000)
    mu, v = 0.3, 0.5
    # 10^4 independent 1x1 chains: the Gaussian prior acts pixelwise
    x = sample_unconditional(GaussianPrior(mu, v), s, (100, 100, 1), SeededRng(7)).ravel()
    n = x.size
    assert abs(x.mean() - mu) < 3 * np.sqrt(v / n)
    assert abs(x.var(ddof=1) - v) < 3 * v * np.sqrt(2 / (n - 1))


def test_sampler_variance_matches_linear_recursion():
    # the chain is linear-Gaussian, so its output variance follows an exact recursion
    s = make_schedule(T=100)
    prior = GaussianPrior(0.0, 0.5)
    var = 1.0
    for t in range(100, 0, -1):
        var = (s.a[t] * prior.gain(t, s) + s.b[t]) ** 2 * var + s.posterior_variance[t]
    x = sample_unconditional(prior, s, (100, 100, 1), SeededRng(11)).ravel()
    assert abs(x.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (x.size - 1))


# learned denoiser -------------------------------------------------------------


def constant_images(n, rng, size=8):
    return np.broadcast_to(rng.uniform(size=(n, 1, 1, 1)), (n, size, size, 1)).copy()


def test_learned_denoiser_beats_rescale_baseline(tmp_path):
    s = make_schedule(T=100)
    rng = SeededRng(8)
    net = denoiser_network(1, rng.child("init"), widths=(8, 16))
    log = tmp_path / "loss.csv"
    den, hist = train_denoiser(net, constant_images(200, rng.child("data")), s, rng.child("train"),
                               epochs=6, adam=AdamState(lr=2e-3), log_path=log)
    m, base = denoiser_mse(den, s, constant_images(64, rng.child("held")), 50, rng.child("eval"))
    assert m <= 0.8 * base
    rows = list(csv.reader(open(log)))
    assert rows[0] == ["epoch", "train_mse"] and len(rows) == 7
    assert [float(r[1]) for r in rows[1:]] == hist


def test_zero_epochs_leave_network_unchanged():
    s = make_schedule(T=10)
    net = denoiser_network(1, SeededRng(9))
    before = net.get_params().copy()
    den, hist = train_denoiser(net, constant_images(4, SeededRng(1)), s, SeededRng(2), 0, AdamState())
    assert hist == [] and np.array_equal(den.network.get_params(), before)


def test_empty_dataset_rejected():
    with pytest.raises(ParameterError):
        train_denoiser(denoiser_network(1, SeededRng(0)), np.zeros((0, 4, 4, 1)), make_schedule(T=10),
                       SeededRng(0), 1, AdamState())


def test_learned_denoiser_shape_and_checkpoint(tmp_path):
    s = make_schedule(T=10)
    den, _ = train_denoiser(denoiser_network(2, SeededRng(0)), np.zeros((2, 8, 8, 2)), s, SeededRng(0), 1,
                            AdamState())
    x = SeededRng(1).normal((8, 8, 2))
    out = den.posterior_mean(x, 5, s)
    assert out.shape == x.shape
    save_denoiser(den, tmp_path / "den")
    assert np.array_equal(load_denoiser(tmp_path / "den").posterior_mean(x, 5, s), out)
    assert load_denoiser(tmp_path / "den").fingerprint() == den.fingerprint()
