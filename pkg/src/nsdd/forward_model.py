"""Circulant lensless measurement operator and its pseudo-inverses.

The operator is circular convolution with a PSF, so it is diagonal in the
2-D DFT.  Every channel is convolved independently with its own kernel (or
with a shared single-channel kernel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .tensor_io import SeededRng, as_image, check_dims


@dataclass(frozen=True)
class Psf:
    kernel: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        k = as_image(self.kernel, "psf kernel")
        if not np.all(np.isfinite(k)):
            raise ParameterError("PSF contains non-finite values")
        if np.any(k < 0):
            raise ParameterError("PSF entries must be nonnegative")
        if self.normalized:
            sums = k.sum(axis=(0, 1))
            if np.any(sums <= 0):
                raise ParameterError("cannot normalize a PSF channel with zero sum")
            k = k / sums
        k = k.copy()
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)


def kernel_origin(kernel: np.ndarray) -> tuple[int, int]:
    """Intensity centroid of the channel-summed kernel, rounded to a pixel."""
    mass = kernel.sum(axis=2)
    total = mass.sum()
    if total <= 0:
        return kernel.shape[0] // 2, kernel.shape[1] // 2
    rows = np.arange(kernel.shape[0])
    cols = np.arange(kernel.shape[1])
    cy = float((mass.sum(axis=1) * rows).sum() / total)
    cx = float((mass.sum(axis=0) * cols).sum() / total)
    return int(np.floor(cy + 0.5)), int(np.floor(cx + 0.5))


def center_kernel(kernel: np.ndarray, dims) -> np.ndarray:
    """Zero-pad ``kernel`` to ``dims`` and roll its centroid to index (0, 0)."""
    h, w, c = check_dims(dims)
    kh, kw, kc = kernel.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kernel.shape[:2]} larger than image {(h, w)}")
    if kc not in (1, c):
        raise DimensionError(f"kernel has {kc} channels, image has {c}")
    cy, cx = kernel_origin(kernel)
    padded = np.zeros((h, w, kc))
    padded[:kh, :kw] = kernel
    padded = np.roll(padded, (-cy, -cx), axis=(0, 1))
    if kc != c:
        padded = np.repeat(padded, c, axis=2)
    return padded


class ConvolutionOperator:
    """y = h (*) x with periodic boundaries, applied per channel."""

    def __init__(self, psf: Psf, dims):
        self.psf = psf
        self.dims = check_dims(dims)
        self.kernel = center_kernel(psf.kernel, self.dims)
        self.transfer = np.fft.fft2(self.kernel, axes=(0, 1))
        self.kernel.setflags(write=False)
        self.transfer.setflags(write=False)

    def _check(self, x, name):
        x = as_image(x, name)
        if x.shape != self.dims:
            raise DimensionError(f"{name} has shape {x.shape}, operator expects {self.dims}")
        return x

    def _filter(self, x, gain):
        return np.fft.ifft2(np.fft.fft2(x, axes=(0, 1)) * gain, axes=(0, 1)).real

    def apply(self, x) -> np.ndarray:
        return self._filter(self._check(x, "x"), self.transfer)

    def adjoint(self, y) -> np.ndarray:
        return self._filter(self._check(y, "y"), np.conj(self.transfer))

    def gram(self, x) -> np.ndarray:
        return self._filter(self._check(x, "x"), np.abs(self.transfer) ** 2)

    def null_bins(self, eps: float | None = None) -> np.ndarray:
        """Boolean mask of DFT bins treated as null space."""
        mag = np.abs(self.transfer)
        if eps is None:
            eps = default_eps(self)
        return mag <= eps

    def __repr__(self):
        return f"ConvolutionOperator(dims={self.dims})"


def make_operator(psf: Psf, dims) -> ConvolutionOperator:
    return ConvolutionOperator(psf, dims)


def apply(op: ConvolutionOperator, x) -> np.ndarray:
    return op.apply(x)


def adjoint(op: ConvolutionOperator, y) -> np.ndarray:
    return op.adjoint(y)


def default_eps(op: ConvolutionOperator) -> float:
    return 1e-6 * float(np.abs(op.transfer).max())


@dataclass(frozen=True)
class PseudoInverse:
    """Per-bin gain approximating A^+.

    ``spectral`` inverts bins with |H| > eps and zeroes the rest (exact
    Moore-Penrose inverse of the circulant operator).  ``wiener`` uses
    conj(H) / (|H|^2 + lambda_w), a biased but stable approximation.
    """

    mode: str
    gains: np.ndarray = field(repr=False)
    eps: float | None = None
    lambda_w: float | None = None
    dims: tuple = ()

    @property
    def exact(self) -> bool:
        return self.mode == "spectral"

    def params(self) -> dict:
        return {"mode": self.mode, "eps": self.eps, "lambda_w": self.lambda_w}

    def rms_gain(self) -> float:
        """Per-pixel std of A^+ n for unit white n (averaged over channels)."""
        return float(np.sqrt(np.mean(np.abs(self.gains) ** 2)))


def make_pinv(op: ConvolutionOperator, mode: str = "spectral", eps: float | None = None,
              lambda_w: float = 1e-2) -> PseudoInverse:
    H = op.transfer
    mag2 = np.abs(H) ** 2
    if mode == "spectral":
        if eps is None:
            eps = default_eps(op)
        if eps <= 0:
            raise ParameterError(f"spectral eps must be positive, got {eps}")
        keep = np.abs(H) > eps
        gains = np.zeros_like(H)
        gains[keep] = np.conj(H[keep]) / mag2[keep]
        gains.setflags(write=False)
        return PseudoInverse("spectral", gains, eps=float(eps), dims=op.dims)
    if mode == "wiener":
        if lambda_w is None or lambda_w <= 0:
            raise ParameterError(f"wiener lambda_w must be positive, got {lambda_w}")
        gains = np.conj(H) / (mag2 + lambda_w)
        gains.setflags(write=False)
        return PseudoInverse("wiener", gains, lambda_w=float(lambda_w), dims=op.dims)
    raise ParameterError(f"unknown pseudo-inverse mode {mode!r}")


def pinv_apply(pi: PseudoInverse, y) -> np.ndarray:
    y = as_image(y, "y")
    if y.shape != pi.dims:
        raise DimensionError(f"y has shape {y.shape}, pseudo-inverse built for {pi.dims}")
    return np.fft.ifft2(np.fft.fft2(y, axes=(0, 1)) * pi.gains, axes=(0, 1)).real


def _check_projector(pi: PseudoInverse, approximate: bool):
    if not pi.exact and not approximate:
        raise ConfigError("range/null projectors need a spectral pseudo-inverse; "
                          "pass approximate=True to accept a Wiener projector")


def range_project(op: ConvolutionOperator, pi: PseudoInverse, x, approximate: bool = False) -> np.ndarray:
    """A^+ A x."""
    _check_projector(pi, approximate)
    return pinv_apply(pi, op.apply(x))


def null_project(op: ConvolutionOperator, pi: PseudoInverse, x, approximate: bool = False) -> np.ndarray:
    """(I - A^+ A) x."""
    _check_projector(pi, approximate)
    x = as_image(x)
    return x - pinv_apply(pi, op.apply(x))


def synth_mask_psf(kind: str, rng: SeededRng, dims, params: dict | None = None) -> Psf:
    """Synthetic lensless-style PSFs.

    random_binary: ``size`` x ``size`` support, each pixel open with
        probability ``fill``.
    radial_rings: concentric rings of period ``period`` pixels (binary,
        duty cycle ``duty``) inside radius ``radius``; a rough stand-in for
        an amplitude radial coded mask.
    gaussian_blob: isotropic Gaussian with std ``width`` pixels.
    """
    h, w, c = check_dims(dims)
    params = dict(params or {})
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = h // 2, w // 2
    r = np.hypot(yy - cy, xx - cx)

    if kind == "random_binary":
        fill = float(params.get("fill", 0.5))
        size = int(params.get("size", min(h, w) // 2))
        if not 0 < fill <= 1:
            raise ParameterError(f"fill must be in (0, 1], got {fill}")
        if not 1 <= size <= min(h, w):
            raise ParameterError(f"size must be in [1, {min(h, w)}], got {size}")
        mask = (rng.uniform(size=(size, size)) < fill).astype(float)
        if mask.sum() == 0:
            mask[size // 2, size // 2] = 1.0
        kernel = np.zeros((h, w))
        top, left = cy - size // 2, cx - size // 2
        kernel[top:top + size, left:left + size] = mask
    elif kind == "radial_rings":
        period = float(params.get("period", 3.0))
        duty = float(params.get("duty", 0.5))
        radius = float(params.get("radius", min(h, w) / 2 - 1))
        if period <= 0 or not 0 < duty <= 1 or radius <= 0:
            raise ParameterError(f"invalid radial_rings params {params}")
        phase = np.mod(r / period, 1.0)
        kernel = ((phase < duty) & (r <= radius)).astype(float)
    elif kind == "gaussian_blob":
        width = float(params.get("width", 1.0))
        if width <= 0:
            raise ParameterError(f"width must be positive, got {width}")
        kernel = np.exp(-0.5 * (r / width) ** 2)
    else:
        raise ParameterError(f"unknown PSF kind {kind!r}")
    return Psf(kernel[:, :, None], normalized=True)
