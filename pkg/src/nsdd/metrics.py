"""Reconstruction quality metrics: MSE, PSNR, SSIM, data residual."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor_io import as_image

PEAK = 1.0


def mse(x, ref) -> float:
    x, ref = as_image(x), as_image(ref)
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {ref.shape}")
    return float(np.mean((x - ref) ** 2))


def psnr(x, ref, peak: float = PEAK) -> float:
    m = mse(x, ref)
    return float("inf") if m == 0 else float(10.0 * np.log10(peak * peak / m))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, ref, peak: float = PEAK, k1: float = 0.01, k2: float = 0.03, win: int = 11,
         sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions and channels.

    Gaussian 11x11 window (sigma 1.5); images smaller than the window use a
    window clipped to the image size.
    """
    x, ref = as_image(x), as_image(ref)
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {ref.shape}")
    size = min(win, x.shape[0], x.shape[1])
    wk = gaussian_window(size, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for ch in range(x.shape[2]):
        a = sliding_window_view(x[:, :, ch], (size, size))
        b = sliding_window_view(ref[:, :, ch], (size, size))
        mu_a = np.einsum("ijkl,kl->ij", a, wk)
        mu_b = np.einsum("ijkl,kl->ij", b, wk)
        var_a = np.einsum("ijkl,kl->ij", a * a, wk) - mu_a ** 2
        var_b = np.einsum("ijkl,kl->ij", b * b, wk) - mu_b ** 2
        cov = np.einsum("ijkl,kl->ij", a * b, wk) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def data_residual(op, x, y) -> float:
    return float(np.linalg.norm(op.apply(x) - as_image(y)))


def compute_metrics(x, reference, op=None, y=None) -> dict:
    rec = {"mse": mse(x, reference), "psnr": psnr(x, reference), "ssim": ssim(x, reference)}
    rec["residual"] = data_residual(op, x, y) if op is not None and y is not None else float("nan")
    return rec


def format_value(v) -> str:
    """CSV formatting: shortest round-trip repr, ``inf`` sentinel for infinite PSNR."""
    if isinstance(v, float):
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)
