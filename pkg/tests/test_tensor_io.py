import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nsdd.errors import DimensionError, FormatError, UnsupportedFormatError
from nsdd.tensor_io import (SeededRng, gaussian_noise, ppm_export, read_tensor,
                            write_tensor)


def test_zero_sigma_gives_zeros():
    out = gaussian_noise(SeededRng(1), (5, 4, 2), 0.0)
    assert out.shape == (5, 4, 2)
    assert not out.any()


def test_noise_moments():
    out = gaussian_noise(SeededRng(7), (64, 64, 1), 1.0)
    assert abs(out.mean()) < 4 / np.sqrt(4096)
    assert abs(out.std() - 1.0) < 0.05


def test_noise_is_reproducible():
    a = gaussian_noise(SeededRng(42), (8, 8, 3), 0.3)
    b = gaussian_noise(SeededRng(42), (8, 8, 3), 0.3)
    assert np.array_equal(a, b)


def test_child_streams_are_independent_of_order():
    base = SeededRng(5)
    first = base.child("noise").normal(10)
    base.child("sampler").normal(10)
    assert np.array_equal(first, SeededRng(5).child("noise").normal(10))
    assert not np.array_equal(first, base.child("sampler").normal(10))


@pytest.mark.parametrize("shape", [(0, 4, 1), (4, -1, 1)])
def test_bad_dims(shape):
    with pytest.raises(DimensionError):
        gaussian_noise(SeededRng(0), shape, 1.0)


def test_round_trip_small(tmp_path):
    t = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)
    write_tensor(tmp_path / "t.tensor", t)
    assert np.array_equal(read_tensor(tmp_path / "t.tensor"), t)


def test_float32_round_trip(tmp_path):
    t = np.random.default_rng(0).standard_normal((3, 5, 2)).astype(np.float32)
    write_tensor(tmp_path / "t.tensor", t)
    back = read_tensor(tmp_path / "t.tensor")
    assert back.dtype == np.float32
    assert np.max(np.abs(back - t)) == 0


def test_corrupt_magic(tmp_path):
    p = tmp_path / "t.tensor"
    write_tensor(p, np.ones((2, 2, 1)))
    raw = bytearray(p.read_bytes())
    raw[0] = ord("X")
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="offset 0"):
        read_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.tensor"
    write_tensor(p, np.ones((4, 4, 1)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(p)


def test_dtype_mismatch(tmp_path):
    p = tmp_path / "t.tensor"
    write_tensor(p, np.ones((2, 2, 1), dtype=np.float32))
    with pytest.raises(FormatError, match="dtype"):
        read_tensor(p, expect_dtype="float64")


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_round_trip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "t.tensor"
    write_tensor(p, arr)
    back = read_tensor(p)
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_pgm_half_gray(tmp_path):
    p = tmp_path / "g.pgm"
    ppm_export(np.full((4, 4, 1), 0.5), p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n4 4\n255\n")
    assert set(raw[len(b"P5\n4 4\n255\n"):]) == {128}


def test_ppm_clamps_and_header(tmp_path):
    p = tmp_path / "c.ppm"
    img = np.stack([np.full((2, 3), -1.0), np.full((2, 3), 0.25), np.full((2, 3), 7.0)], axis=2)
    ppm_export(img, p)
    raw = p.read_bytes()
    header = b"P6\n3 2\n255\n"
    assert raw.startswith(header)
    pix = np.frombuffer(raw[len(header):], dtype=np.uint8).reshape(2, 3, 3)
    assert (pix[..., 0] == 0).all() and (pix[..., 1] == 64).all() and (pix[..., 2] == 255).all()


def test_ppm_rejects_two_channels(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        ppm_export(np.zeros((2, 2, 2)), tmp_path / "x.ppm")
