"""Wiener and ADMM-TV baselines.

ADMM solves

    min_{x >= 0}  ||y - A x||^2 + tau * ||D x||_1

with D the circular forward differences (anisotropic TV).  The constraint
block K = [Dv; Dh; I] is split into z = K x, so the x-update is a single
per-bin division in the DFT domain, the TV part of z is a soft-threshold
and the last block of z is clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DivergenceError, ParameterError
from .forward_model import ConvolutionOperator, make_pinv, pinv_apply
from .tensor_io import as_image


def wiener_reconstruct(op: ConvolutionOperator, y, lambda_w: float) -> np.ndarray:
    if lambda_w is None or lambda_w <= 0:
        raise ParameterError("lambda_w must be > 0; use a spectral pseudo-inverse for exact inversion")
    return pinv_apply(make_pinv(op, "wiener", lambda_w=lambda_w), y)


@dataclass(frozen=True)
class AdmmConfig:
    tau: float = 1e-2
    rho: float = 1.0
    iters: int = 100
    tol: float = 0.0

    def __post_init__(self):
        if self.iters < 1:
            raise ParameterError(f"iters must be >= 1, got {self.iters}")
        if self.rho <= 0:
            raise ParameterError(f"rho must be > 0, got {self.rho}")
        if self.tau < 0 or self.tol < 0:
            raise ParameterError("tau and tol must be nonnegative")


@dataclass
class AdmmTrace:
    """Per-iteration records.

    ``objective`` is the value at the returned incumbent, ``raw_objective``
    the value at the current ADMM split iterate (not monotone in general).
    """

    objective: list = field(default_factory=list)
    raw_objective: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)

    def rows(self):
        return [(k + 1, f, g, r) for k, (f, g, r) in
                enumerate(zip(self.objective, self.raw_objective, self.primal_residual))]


def diff(x: np.ndarray) -> np.ndarray:
    """Circular forward differences stacked on a new leading axis: (2, H, W, C)."""
    return np.stack([np.roll(x, -1, axis=0) - x, np.roll(x, -1, axis=1) - x])


def diff_adjoint(d: np.ndarray) -> np.ndarray:
    return (np.roll(d[0], 1, axis=0) - d[0]) + (np.roll(d[1], 1, axis=1) - d[1])


def tv(x: np.ndarray) -> float:
    return float(np.abs(diff(x)).sum())


def objective(op: ConvolutionOperator, y: np.ndarray, x: np.ndarray, tau: float) -> float:
    r = y - op.apply(x)
    return float(np.sum(r * r) + tau * tv(x))


def _diff_transfer(dims):
    """|DFT|^2 of D^T D, i.e. the eigenvalues of the circular Laplacian."""
    h, w, _ = dims
    ly = 2.0 - 2.0 * np.cos(2 * np.pi * np.arange(h) / h)
    lx = 2.0 - 2.0 * np.cos(2 * np.pi * np.arange(w) / w)
    return ly[:, None, None] + lx[None, :, None]


def soft_threshold(v: np.ndarray, thresh: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def admm_tv_reconstruct(op: ConvolutionOperator, y, cfg: AdmmConfig = AdmmConfig(),
                        x0=None) -> tuple[np.ndarray, AdmmTrace]:
    """Return the best nonnegative split iterate seen and the trace.

    Plain ADMM does not decrease the objective monotonically, so the
    returned iterate is an incumbent updated only when the feasible split
    variable improves on it; the dual and split state evolve unchanged.
    """
    y = as_image(y, "y")
    if y.shape != op.dims:
        raise DimensionError(f"y has shape {y.shape}, operator expects {op.dims}")
    rho, tau = cfg.rho, cfg.tau

    denom = 2.0 * np.abs(op.transfer) ** 2 + rho * (_diff_transfer(op.dims) + 1.0)
    rhs_data = 2.0 * np.fft.fft2(op.adjoint(y), axes=(0, 1))

    x = np.zeros(op.dims) if x0 is None else as_image(x0).copy()
    z_tv, z_pos = diff(x), np.maximum(x, 0.0)
    u_tv, u_pos = np.zeros_like(z_tv), np.zeros_like(z_pos)

    trace = AdmmTrace()
    best, f_best = z_pos, objective(op, y, z_pos, tau)
    scale = max(f_best, 1.0)
    for k in range(cfg.iters):
        v = diff_adjoint(z_tv - u_tv) + (z_pos - u_pos)
        x = np.fft.ifft2((rhs_data + rho * np.fft.fft2(v, axes=(0, 1))) / denom, axes=(0, 1)).real

        dx = diff(x)
        z_tv = soft_threshold(dx + u_tv, tau / rho)
        z_pos = np.maximum(x + u_pos, 0.0)

        r_tv, r_pos = dx - z_tv, x - z_pos
        u_tv += r_tv
        u_pos += r_pos

        f = objective(op, y, z_pos, tau)
        res = float(np.sqrt(np.sum(r_tv ** 2) + np.sum(r_pos ** 2)))
        if not np.isfinite(f) or f > 1e6 * scale:
            raise DivergenceError("ADMM objective diverged", k + 1)
        if f <= f_best:
            best, f_best = z_pos, f
        trace.objective.append(f_best)
        trace.raw_objective.append(f)
        trace.primal_residual.append(res)
        if res < cfg.tol:
            break
    return best, trace
