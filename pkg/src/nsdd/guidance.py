"""Guided reconstruction: DPS likelihood guidance and DDNM / DDNM+ range-null
correction of the posterior-mean estimate."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (DenoiserPrior, GaussianPrior, LearnedDenoiser, NoiseSchedule,
                        ancestral_step, check_t)
from .errors import DimensionError, NumericError, ParameterError
from .forward_model import ConvolutionOperator, PseudoInverse, pinv_apply
from .tensor_io import SeededRng, as_image


@dataclass(frozen=True)
class DpsConfig:
    zeta: float = 0.5
    stop_gradient: bool = False

    def __post_init__(self):
        if self.zeta < 0:
            raise ParameterError(f"zeta must be >= 0, got {self.zeta}")


@dataclass(frozen=True)
class DdnmConfig:
    """``mode`` is ``exact`` (hard range replacement) or ``relaxed`` (DDNM+).

    ``sigma_y_scale`` selects how ``sigma_y`` is read: ``raw`` uses it as the
    noise std already in the x0 domain; ``measurement`` treats it as the
    measurement-noise std and maps it through the RMS pseudo-inverse gain.
    """

    pinv: PseudoInverse
    sigma_y: float = 0.0
    mode: str = "relaxed"
    sigma_y_scale: str = "raw"

    def __post_init__(self):
        if self.sigma_y < 0:
            raise ParameterError(f"sigma_y must be >= 0, got {self.sigma_y}")
        if self.mode not in ("exact", "relaxed"):
            raise ParameterError(f"unknown DDNM mode {self.mode!r}")
        if self.sigma_y_scale not in ("raw", "measurement"):
            raise ParameterError(f"unknown sigma_y_scale {self.sigma_y_scale!r}")

    def effective_sigma_y(self) -> float:
        if self.mode == "exact":
            return 0.0
        if self.sigma_y_scale == "measurement":
            return self.sigma_y * self.pinv.rms_gain()
        return self.sigma_y


@dataclass
class GuidanceTrace:
    t: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    lambda_t: list = field(default_factory=list)
    phi_t: list = field(default_factory=list)

    def add(self, t, residual, lam, phi):
        self.t.append(int(t))
        self.residual.append(float(residual))
        self.lambda_t.append(float(lam))
        self.phi_t.append(float(phi))

    def __len__(self):
        return len(self.t)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "residual", "lambda_t", "phi_t"])
            for row in zip(self.t, self.residual, self.lambda_t, self.phi_t):
                w.writerow([row[0]] + [repr(v) for v in row[1:]])


def _check_y(op, y):
    y = as_image(y, "y")
    if y.shape != op.dims:
        raise DimensionError(f"y has shape {y.shape}, operator expects {op.dims}")
    return y


# DPS --------------------------------------------------------------------------


def dps_gradient(op: ConvolutionOperator, y, prior: DenoiserPrior, sched: NoiseSchedule, x_t, t: int,
                 stop_gradient: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Return (grad_{x_t} ||y - A x0_hat(x_t)||^2, x0_hat).

    With ``stop_gradient`` the Jacobian of the denoiser is replaced by the
    identity.
    """
    def cotangent(x0):
        return 2.0 * op.adjoint(op.apply(x0) - y)

    if stop_gradient:
        x0 = prior.posterior_mean(x_t, t, sched)
        return cotangent(x0), x0
    if isinstance(prior, LearnedDenoiser):
        x0, g = prior.posterior_mean_and_vjp(x_t, t, sched, cotangent)
        return g, x0
    x0 = prior.posterior_mean(x_t, t, sched)
    return prior.posterior_mean_vjp(x_t, t, sched, cotangent(x0)), x0


def dps_reconstruct(op: ConvolutionOperator, y, prior: DenoiserPrior, sched: NoiseSchedule,
                    cfg: DpsConfig, rng: SeededRng) -> tuple[np.ndarray, GuidanceTrace]:
    """Ancestral DDPM step followed by subtraction of zeta * likelihood gradient."""
    y = _check_y(op, y)
    trace = GuidanceTrace()
    x = rng.normal(op.dims)
    for t in range(sched.T, 0, -1):
        if cfg.zeta > 0:
            g, x0 = dps_gradient(op, y, prior, sched, x, t, cfg.stop_gradient)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite DPS gradient at step t={t}")
        else:
            x0 = prior.posterior_mean(x, t, sched)
        trace.add(t, np.linalg.norm(op.apply(x0) - y), 1.0, sched.posterior_variance[t])
        x_next = ancestral_step(sched, x, x0, t, rng)
        if cfg.zeta > 0:
            x_next = x_next - cfg.zeta * g
        x = x_next
    return x, trace


# DDNM / DDNM+ -----------------------------------------------------------------


def ddnm_update(pinv: PseudoInverse, op: ConvolutionOperator, x0_hat, y) -> np.ndarray:
    """A^+ y + (I - A^+ A) x0_hat, evaluated as x0_hat - A^+ (A x0_hat - y)."""
    return x0_hat - pinv_apply(pinv, op.apply(x0_hat) - y)


def ddnm_plus_coefficients(sched: NoiseSchedule, t: int, sigma_y: float) -> tuple[float, float]:
    """(lambda_t, Phi_t) for the relaxed correction.

    lambda_t = 1 when sigma_t >= a_t sigma_y (this includes a_t sigma_y = 0),
    otherwise sigma_t / (a_t sigma_y); Phi_t = sigma_t^2 - (a_t lambda_t sigma_y)^2.
    """
    t = check_t(sched, t)
    if sigma_y < 0:
        raise ParameterError(f"sigma_y must be >= 0, got {sigma_y}")
    s, a = sched.sigma[t], sched.a[t]
    noise = a * sigma_y
    if s >= noise:
        lam = 1.0
        phi = s * s - noise * noise
    else:
        lam = s / noise
        phi = 0.0
    return lam, phi


def ddnm_plus_update(pinv: PseudoInverse, op: ConvolutionOperator, sched: NoiseSchedule, x0_hat, y,
                     t: int, sigma_y: float) -> tuple[np.ndarray, float, float]:
    lam, phi = ddnm_plus_coefficients(sched, t, sigma_y)
    return x0_hat - lam * pinv_apply(pinv, op.apply(x0_hat) - y), lam, phi


def ddnm_reconstruct(op: ConvolutionOperator, y, prior: DenoiserPrior, sched: NoiseSchedule,
                     cfg: DdnmConfig, rng: SeededRng, x_T=None) -> tuple[np.ndarray, GuidanceTrace]:
    """DDNM (exact) or DDNM+ (relaxed) sampling loop from t = T down to 1."""
    y = _check_y(op, y)
    sigma_y = cfg.effective_sigma_y()
    trace = GuidanceTrace()
    x = rng.normal(op.dims) if x_T is None else as_image(x_T).copy()
    for t in range(sched.T, 0, -1):
        x0 = prior.posterior_mean(x, t, sched)
        if cfg.mode == "exact":
            x0 = ddnm_update(cfg.pinv, op, x0, y)
            lam, phi = 1.0, sched.sigma[t] * sched.sigma[t] - 0.0
        else:
            x0, lam, phi = ddnm_plus_update(cfg.pinv, op, sched, x0, y, t, sigma_y)
        trace.add(t, np.linalg.norm(op.apply(x0) - y), lam, phi)
        x = ancestral_step(sched, x, x0, t, rng, extra_variance=phi)
    return x, trace


def scalar_posterior(prior: GaussianPrior, gain: float, y: float, noise_std: float) -> tuple[float, float]:
    """Conjugate posterior of x for y = gain * x + n, n ~ N(0, noise_std^2)."""
    mu0, v0 = float(prior.mean), prior.variance
    if noise_std == 0:
        return y / gain, 0.0
    prec = 1.0 / v0 + gain * gain / noise_std ** 2
    var = 1.0 / prec
    return var * (mu0 / v0 + gain * y / noise_std ** 2), var
