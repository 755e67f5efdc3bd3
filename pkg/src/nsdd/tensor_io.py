"""Image arrays, seeded random streams and the on-disk tensor format.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` (row-major,
channel-last, float64).  Anything exported by a public function is finite.

TensorFile layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"NSDDTNSR"
    8       1     dtype code (0 = float32, 1 = float64)
    9       3     reserved, zero
    12      4     H (uint32)
    16      4     W (uint32)
    20      4     C (uint32)
    24      ...   H*W*C little-endian values, row-major (H, W, C)
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, UnsupportedFormatError

MAGIC = b"NSDDTNSR"
HEADER = struct.Struct("<8sB3xIII")
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def as_image(x, name: str = "image") -> np.ndarray:
    """Validate and return ``x`` as a float64 (H, W, C) array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(f"{name} must have shape (H, W, C) with positive dims, got {arr.shape}")
    return arr


def check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        dims = dims + (1,)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise DimensionError(f"dimensions must be three positive integers, got {dims}")
    return dims


class SeededRng:
    """A single-owner random stream identified by a 64-bit seed.

    PCG64 gives the same sequence on every platform for the same seed.
    Independent stages get their own stream via :meth:`child`, which hashes
    a label into the base seed so reordering stages never couples them.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, label) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, label))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def derive_seed(seed: int, label) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def gaussian_noise(rng: SeededRng, shape, sigma: float) -> np.ndarray:
    """i.i.d. N(0, sigma^2) samples of the given (H, W, C) shape."""
    dims = check_dims(shape)
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(dims)
    return sigma * rng.normal(dims)


def write_tensor(path, t, dtype: str | None = None) -> None:
    """Write ``t`` as a TensorFile; float32 inputs keep float32 unless overridden."""
    if dtype is None:
        dtype = "float32" if np.asarray(t).dtype == np.float32 else "float64"
    arr = as_image(t)
    dt = np.dtype(dtype)
    if dt not in _CODE_OF:
        raise UnsupportedFormatError(f"unsupported dtype {dtype!r}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to write non-finite values")
    h, w, c = arr.shape
    payload = np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, _CODE_OF[dt], h, w, c))
        fh.write(payload)
    os.replace(tmp, path)


def read_tensor(path, expect_dtype: str | None = None) -> np.ndarray:
    """Read a TensorFile.  float32 payloads are returned as float32 arrays."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header in {path}", offset=len(data))
    magic, code, h, w, c = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}", offset=0)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code} in {path}", offset=8)
    dt = DTYPE_CODES[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dt.newbyteorder("="):
        raise FormatError(f"dtype mismatch in {path}: file has {dt.name}, expected {expect_dtype}", offset=8)
    if min(h, w, c) < 1:
        raise FormatError(f"nonpositive dimension in {path}", offset=12)
    need = h * w * c * dt.itemsize
    have = len(data) - HEADER.size
    if have < need:
        raise FormatError(f"truncated payload in {path}: need {need} bytes, have {have}", offset=len(data))
    if have > need:
        raise FormatError(f"trailing bytes in {path}", offset=HEADER.size + need)
    arr = np.frombuffer(data, dtype=dt, count=h * w * c, offset=HEADER.size)
    return arr.reshape(h, w, c).astype(dt.newbyteorder("="))


def ppm_export(t, path) -> None:
    """Write a binary PGM (C=1) or PPM (C=3).

    Values are clamped to [0, 1] and quantized as floor(255 * v + 0.5),
    i.e. round-half-up, so 0.5 maps to 128.
    """
    arr = as_image(t)
    h, w, c = arr.shape
    if c not in (1, 3):
        raise UnsupportedFormatError(f"PPM/PGM export needs 1 or 3 channels, got {c}")
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())
