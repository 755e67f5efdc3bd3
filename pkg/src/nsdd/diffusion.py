"""Discrete DDPM machinery: schedules, posterior-mean estimates, priors,
ancestral sampling and denoiser training.

Timesteps are 1-based, ``t = 1..T``.  Schedule arrays have length T + 1
with index 0 holding the boundary values (alpha_bar_0 = 1).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .micro_net import (AdamState, Network, adam_step, load_network, save_network,
                        unet_backbone)
from .tensor_io import SeededRng


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule.

    ``sigma`` is the std of the DDPM posterior q(x_{t-1} | x_t, x_0), i.e.
    the noise injected at step t; ``sigma_marginal`` is sqrt(1 - alpha_bar_t).
    ``a`` and ``b`` are the coefficients of x_0 and x_t in the posterior
    mean, so ``a`` is also the DDNM+ range-noise gain.
    """

    T: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    sigma_marginal: np.ndarray = field(repr=False)
    posterior_variance: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    beta_min: float = 0.0
    beta_max: float = 0.0

    def params(self) -> dict:
        return {"kind": "linear_beta", "T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(kind: str = "linear_beta", T: int = 100, beta_min: float | None = None,
                  beta_max: float | None = None) -> NoiseSchedule:
    """Linear beta schedule; defaults rescale (1e-4, 0.02) @ T=1000 to the given T."""
    if kind != "linear_beta":
        raise ParameterError(f"unknown schedule kind {kind!r}")
    T = int(T)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if beta_min is None:
        beta_min = min(1e-4 * 1000 / T, 0.5)
    if beta_max is None:
        beta_max = min(0.02 * 1000 / T, 0.999)
    if not 0 < beta_min <= beta_max < 1:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")

    beta = np.empty(T + 1)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_min, beta_max, T) if T > 1 else [beta_min]
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    ab_prev = np.r_[1.0, alpha_bar[:-1]]
    one_minus = 1.0 - alpha_bar

    post_var = np.zeros(T + 1)
    a = np.zeros(T + 1)
    b = np.zeros(T + 1)
    post_var[1:] = beta[1:] * (1.0 - ab_prev[1:]) / one_minus[1:]
    a[1:] = np.sqrt(ab_prev[1:]) * beta[1:] / one_minus[1:]
    b[1:] = np.sqrt(alpha[1:]) * (1.0 - ab_prev[1:]) / one_minus[1:]

    arrays = dict(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.sqrt(post_var),
                  sigma_marginal=np.sqrt(one_minus), posterior_variance=post_var, a=a, b=b)
    for arr in arrays.values():
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta_min=float(beta_min), beta_max=float(beta_max), **arrays)


def check_t(sched: NoiseSchedule, t: int) -> int:
    t = int(t)
    if not 1 <= t <= sched.T:
        raise ParameterError(f"timestep {t} outside [1, {sched.T}]")
    return t


def q_sample(sched: NoiseSchedule, x0, t: int, noise) -> np.ndarray:
    """Forward noising x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    ab = sched.alpha_bar[check_t(sched, t)]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# priors ---------------------------------------------------------------------


class DenoiserPrior:
    """A prior known through its score or its posterior-mean map.

    Subclasses implement at least one of :meth:`score` or
    :meth:`posterior_mean`; the other follows from the Tweedie relation
    x0_hat = (x_t + (1 - ab_t) score) / sqrt(ab_t).
    ``posterior_mean_vjp`` returns J^T v for J = d x0_hat / d x_t.
    """

    def score(self, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
        ab = sched.alpha_bar[t]
        return (np.sqrt(ab) * self.posterior_mean(x_t, t, sched) - x_t) / (1.0 - ab)

    def posterior_mean(self, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
        ab = sched.alpha_bar[t]
        return (x_t + (1.0 - ab) * self.score(x_t, t, sched)) / np.sqrt(ab)

    def posterior_mean_vjp(self, x_t, t: int, sched: NoiseSchedule, cotangent):
        raise NotImplementedError

    def fingerprint(self) -> str:
        raise NotImplementedError


class GaussianPrior(DenoiserPrior):
    """x0 ~ N(mean, variance * I); every diffusion quantity is closed form."""

    def __init__(self, mean=0.0, variance: float = 1.0):
        if variance < 0:
            raise ParameterError(f"variance must be >= 0, got {variance}")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance = float(variance)

    def marginal(self, t: int, sched: NoiseSchedule):
        ab = sched.alpha_bar[t]
        return np.sqrt(ab) * self.mean, ab * self.variance + (1.0 - ab)

    def score(self, x_t, t, sched):
        m, var = self.marginal(t, sched)
        return -(x_t - m) / var

    def gain(self, t, sched) -> float:
        """d x0_hat / d x_t, a scalar for an isotropic prior."""
        ab = sched.alpha_bar[t]
        return np.sqrt(ab) * self.variance / (ab * self.variance + 1.0 - ab)

    def posterior_mean(self, x_t, t, sched):
        m, _ = self.marginal(t, sched)
        return self.mean + self.gain(t, sched) * (x_t - m)

    def posterior_mean_vjp(self, x_t, t, sched, cotangent):
        return self.gain(t, sched) * np.asarray(cotangent)

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.mean).tobytes() + repr(self.variance).encode())
        return "gaussian:" + h.hexdigest()[:16]


class LearnedDenoiser(DenoiserPrior):
    """Preconditioned x0 predictor.

    x0_hat = base(x_t) + c_out(t) * net(concat(x_t, sigma_marginal_t)), where
    ``base`` is the closed-form posterior mean of a Gaussian fit to the data
    (mean, variance) and c_out(t) is that Gaussian's posterior std.  At low
    noise the base is nearly the identity and the network only supplies a
    small correction, so small-t estimates are not limited by network error.
    """

    def __init__(self, network: Network, data_mean: float = 0.0, data_variance: float = 1.0):
        if data_variance <= 0:
            raise ParameterError(f"data_variance must be > 0, got {data_variance}")
        self.network = network
        self.base = GaussianPrior(float(data_mean), float(data_variance))

    def c_out(self, t, sched) -> float:
        ab, v = sched.alpha_bar[t], self.base.variance
        return float(np.sqrt(v * (1.0 - ab) / (ab * v + 1.0 - ab)))

    def _input(self, x_t, t, sched):
        x_t = np.asarray(x_t, dtype=np.float64)
        level = np.full(x_t.shape[:-1] + (1,), sched.sigma_marginal[t])
        return np.concatenate([x_t, level], axis=-1)

    def posterior_mean(self, x_t, t, sched):
        out = self.network(self._input(x_t, t, sched))
        if out.shape != np.shape(x_t):
            raise ShapeError(f"denoiser output {out.shape} != input {np.shape(x_t)}")
        return self.base.posterior_mean(x_t, t, sched) + self.c_out(t, sched) * out

    def posterior_mean_and_vjp(self, x_t, t, sched, cotangent_fn):
        """Forward once, then J^T cotangent_fn(x0_hat).  Returns (x0_hat, vjp)."""
        c = self.c_out(t, sched)
        x0 = self.base.posterior_mean(x_t, t, sched) + c * self.network.forward(self._input(x_t, t, sched))
        cot = cotangent_fn(x0)
        _, dinput = self.network.backward(c * cot)
        return x0, dinput[..., :-1] + self.base.gain(t, sched) * cot

    def posterior_mean_vjp(self, x_t, t, sched, cotangent):
        return self.posterior_mean_and_vjp(x_t, t, sched, lambda _: cotangent)[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.network.get_params().tobytes())
        h.update(repr((float(self.base.mean), self.base.variance)).encode())
        return "learned:" + h.hexdigest()[:16]


def posterior_mean_estimate(prior: DenoiserPrior, sched: NoiseSchedule, x_t, t: int) -> np.ndarray:
    return prior.posterior_mean(x_t, check_t(sched, t), sched)


# sampling ---------------------------------------------------------------------


def ancestral_step(sched: NoiseSchedule, x_t, x0_hat, t: int, rng: SeededRng,
                   extra_variance: float | None = None) -> np.ndarray:
    """Draw x_{t-1} ~ N(a_t x0_hat + b_t x_t, Phi_t I).

    Phi_t defaults to the DDPM posterior variance.  One standard-normal
    draw is always consumed so RNG streams stay aligned across variants.
    """
    t = check_t(sched, t)
    phi = sched.posterior_variance[t] if extra_variance is None else extra_variance
    if phi < 0:
        raise ParameterError(f"Phi_t must be >= 0, got {phi}")
    mean = sched.a[t] * x0_hat + sched.b[t] * x_t
    z = rng.normal(np.shape(x_t))
    return mean + np.sqrt(phi) * z


def sample_unconditional(prior: DenoiserPrior, sched: NoiseSchedule, shape, rng: SeededRng) -> np.ndarray:
    x = rng.normal(shape)
    for t in range(sched.T, 0, -1):
        x0 = prior.posterior_mean(x, t, sched)
        x = ancestral_step(sched, x, x0, t, rng)
    return x


# training ---------------------------------------------------------------------


def denoiser_network(channels: int, rng: SeededRng, widths=(16, 32)) -> Network:
    return unet_backbone(channels + 1, channels, rng, widths=widths)


def _noisy_batch(den: LearnedDenoiser, sched, x0, rng):
    """Network input, target residual and per-item c_out for one minibatch."""
    n = x0.shape[0]
    ts = rng.integers(1, sched.T + 1, size=n)
    eps = rng.normal(x0.shape)
    ab = sched.alpha_bar[ts][:, None, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    level = np.broadcast_to(sched.sigma_marginal[ts][:, None, None, None], x0.shape[:-1] + (1,))
    c = np.array([den.c_out(t, sched) for t in ts])[:, None, None, None]
    base = np.stack([den.base.posterior_mean(x_t[i], ts[i], sched) for i in range(n)])
    return np.concatenate([x_t, level], axis=-1), (x0 - base) / c, c


def train_denoiser(net: Network, scenes, sched: NoiseSchedule, rng: SeededRng, epochs: int,
                   adam: AdamState, batch_size: int = 16, log_path=None) -> tuple[LearnedDenoiser, list]:
    """Fit the preconditioned x0 predictor over uniformly drawn timesteps.

    The Gaussian base is fit to the scene mean and variance.  The loss is
    the x0 MSE, i.e. the network residual error weighted by c_out^2.
    Returns the denoiser (wrapping ``net``, trained in place) and the
    per-epoch mean per-pixel training MSE.
    """
    scenes = np.asarray(scenes, dtype=np.float64)
    if scenes.ndim != 4 or scenes.shape[0] == 0:
        raise ParameterError("scenes must be a nonempty (N, H, W, C) stack")
    den = LearnedDenoiser(net, scenes.mean(), max(scenes.var(), 1e-6))
    history = []
    params = net.get_params()
    n = scenes.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            x0 = scenes[order[start:start + batch_size]]
            inp, target, c = _noisy_batch(den, sched, x0, rng)
            pred = net.forward(inp)
            diff = c * (pred - target)
            loss = float(np.sum(diff ** 2)) / x0.shape[0]
            if not np.isfinite(loss):
                raise NumericError(f"denoiser loss diverged in epoch {epoch + 1}")
            grads, _ = net.backward(2.0 * c * diff / x0.shape[0])
            params = adam_step(adam, params, grads)
            net.set_params(params)
            total += loss * x0.shape[0]
        history.append(total / n / scenes[0].size)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse"])
            for e, v in enumerate(history, 1):
                w.writerow([e, repr(v)])
    return den, history


def denoiser_mse(prior: DenoiserPrior, sched: NoiseSchedule, scenes, t: int, rng: SeededRng) -> tuple[float, float]:
    """(prior MSE, rescale-baseline MSE) for predicting x0 from x_t at step t.

    The baseline predicts x_t / sqrt(ab_t).
    """
    scenes = np.asarray(scenes, dtype=np.float64)
    eps = rng.normal(scenes.shape)
    ab = sched.alpha_bar[t]
    x_t = np.sqrt(ab) * scenes + np.sqrt(1 - ab) * eps
    pred = np.stack([prior.posterior_mean(x, t, sched) for x in x_t])
    base = x_t / np.sqrt(ab)
    return float(np.mean((pred - scenes) ** 2)), float(np.mean((base - scenes) ** 2))


def save_denoiser(den: LearnedDenoiser, directory) -> None:
    directory = Path(directory)
    save_network(den.network, directory)
    meta = {"data_mean": float(den.base.mean), "data_variance": den.base.variance}
    (directory / "denoiser.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_denoiser(directory) -> LearnedDenoiser:
    directory = Path(directory)
    meta = json.loads((directory / "denoiser.json").read_text())
    return LearnedDenoiser(load_network(directory), meta["data_mean"], meta["data_variance"])
