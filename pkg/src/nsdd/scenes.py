"""Synthetic scenes and capture simulation."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .forward_model import ConvolutionOperator
from .tensor_io import SeededRng, check_dims, gaussian_noise

SCENE_KINDS = ("piecewise_constant", "smooth_gradients", "sparse_dots", "checkerboard")


def _piecewise_constant(rng, h, w, c, n_rects=4):
    img = np.full((h, w, c), rng.uniform(0.0, 0.4))
    for _ in range(n_rects):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        rh, rw = rng.integers(2, max(3, h // 2) + 1), rng.integers(2, max(3, w // 2) + 1)
        img[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.2, 1.0, size=c)
    return img


def _smooth_gradients(rng, h, w, c):
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    img = np.empty((h, w, c))
    for k in range(c):
        gy, gx = rng.uniform(-1, 1, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[:, :, k] = 0.5 + 0.25 * (gy * (yy - 0.5) + gx * (xx - 0.5)) * 2 \
            + 0.15 * np.sin(2 * np.pi * (yy + xx) + phase)
    return np.clip(img, 0.0, 1.0)


def _sparse_dots(rng, h, w, c, density):
    mask = rng.uniform(size=(h, w)) < density
    vals = rng.uniform(0.5, 1.0, size=(h, w, c))
    return vals * mask[:, :, None]


def _checkerboard(rng, h, w, c):
    period = int(rng.integers(2, max(3, min(h, w) // 2) + 1))
    oy, ox = rng.integers(0, period, size=2)
    lo, hi = sorted(rng.uniform(0.0, 1.0, size=2))
    yy, xx = np.mgrid[0:h, 0:w]
    board = (((yy + oy) // period + (xx + ox) // period) % 2).astype(float)
    return np.repeat((lo + (hi - lo) * board)[:, :, None], c, axis=2)


def synth_scenes(kind: str, n: int, rng: SeededRng, dims, density: float = 0.05) -> np.ndarray:
    """``n`` scenes stacked as (n, H, W, C) with values in [0, 1].

    ``kind`` may also be ``mixed`` to cycle through all kinds.
    """
    h, w, c = check_dims(dims)
    if n < 1:
        raise ParameterError(f"need n >= 1 scenes, got {n}")
    if kind != "mixed" and kind not in SCENE_KINDS:
        raise ParameterError(f"unknown scene kind {kind!r}")
    if not 0 <= density <= 1:
        raise ParameterError(f"density must be in [0, 1], got {density}")
    out = np.empty((n, h, w, c))
    for i in range(n):
        k = SCENE_KINDS[i % len(SCENE_KINDS)] if kind == "mixed" else kind
        if k == "piecewise_constant":
            img = _piecewise_constant(rng, h, w, c)
        elif k == "smooth_gradients":
            img = _smooth_gradients(rng, h, w, c)
        elif k == "sparse_dots":
            img = _sparse_dots(rng, h, w, c, density)
        else:
            img = _checkerboard(rng, h, w, c)
        out[i] = img
    return out


def simulate_capture(op: ConvolutionOperator, scene, sigma_n: float, rng: SeededRng) -> np.ndarray:
    """y = A x + n with n ~ N(0, sigma_n^2 I)."""
    return op.apply(scene) + gaussian_noise(rng, op.dims, sigma_n)
