import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_png
from poisson_denoise.errors import DomainError, FormatError
from poisson_denoise.imaging import (
    LUMA_WEIGHTS,
    PSNR_CAP_DB,
    crop_center,
    load_grayscale,
    normalize_shift,
    pad_symmetric,
    psnr,
    rmse,
    save_pgm,
    scale_to_peak,
    unshift,
)

unit_images = arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(1, 12)),
    elements=st.floats(0.0, 1.0, allow_nan=False),
)


# --- file I/O ---------------------------------------------------------------


def test_pgm_round_trip_is_bit_exact(tmp_path, rng):
    levels = rng.integers(0, 256, size=(7, 11))
    img = levels / 255.0
    path = tmp_path / "a.pgm"
    save_pgm(path, img)
    back = load_grayscale(path)
    np.testing.assert_array_equal(np.rint(back * 255), levels)
    save_pgm(tmp_path / "b.pgm", back)
    assert (tmp_path / "b.pgm").read_bytes() == path.read_bytes()


def test_pgm_header_comments_and_maxval(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1\n# another\n100\n" + bytes([0, 100]))
    np.testing.assert_allclose(load_grayscale(path), [[0.0, 1.0]])


@pytest.mark.parametrize(
    "payload",
    [
        b"P5\n4 4\n255\n" + bytes(3),  # truncated pixels
        b"P5\n4 4\n65535\n" + bytes(32),  # 16-bit
        b"P5\n4 x\n255\n" + bytes(16),  # bad field
        b"P2\n1 1\n255\n0",  # ASCII PGM
        b"P5\n4",  # truncated header
        b"hello",
    ],
)
def test_pgm_format_errors(tmp_path, payload):
    path = tmp_path / "bad.pgm"
    path.write_bytes(payload)
    with pytest.raises(FormatError) as info:
        load_grayscale(path)
    assert info.value.offset is not None


@pytest.mark.parametrize("filter_type", [0, 1, 2, 3, 4])
def test_png_gray_all_filters(tmp_path, rng, filter_type):
    pixels = rng.integers(0, 256, size=(6, 9)).astype(np.uint8)
    path = tmp_path / "g.png"
    path.write_bytes(make_png(pixels, 0, filter_type))
    np.testing.assert_array_equal(load_grayscale(path) * 255, pixels.astype(np.float64))


@pytest.mark.parametrize("filter_type", [0, 1, 4])
def test_png_rgb_to_luma(tmp_path, rng, filter_type):
    pixels = rng.integers(0, 256, size=(5, 4, 3)).astype(np.uint8)
    path = tmp_path / "c.png"
    path.write_bytes(make_png(pixels, 2, filter_type))
    expected = pixels.astype(np.float64) / 255.0 @ np.array(LUMA_WEIGHTS)
    np.testing.assert_allclose(load_grayscale(path), expected, rtol=0, atol=1e-12)


def test_png_alpha_is_ignored(tmp_path, rng):
    gray = rng.integers(0, 256, size=(3, 3)).astype(np.uint8)
    ga = np.stack([gray, rng.integers(0, 256, size=(3, 3)).astype(np.uint8)], axis=-1)
    path = tmp_path / "ga.png"
    path.write_bytes(make_png(ga, 4, 2))
    np.testing.assert_array_equal(load_grayscale(path) * 255, gray.astype(np.float64))


def test_png_errors_report_offsets(tmp_path):
    good = make_png(np.zeros((2, 2), np.uint8), 0)
    bad_crc = bytearray(good)
    bad_crc[30] ^= 0xFF  # inside IHDR body / CRC
    cases = [bytes(bad_crc), good[:20]]
    for data in cases:
        path = tmp_path / "bad.png"
        path.write_bytes(data)
        with pytest.raises(FormatError) as info:
            load_grayscale(path)
        assert "offset" in str(info.value)


# --- value conventions --------------------------------------------------------


def test_scale_to_peak_domain():
    np.testing.assert_array_equal(scale_to_peak(np.array([[0.0, 0.5, 1.0]]), 8), [[0.0, 4.0, 8.0]])
    with pytest.raises(DomainError):
        scale_to_peak(np.array([[1.2]]), 8)
    with pytest.raises(DomainError):
        scale_to_peak(np.array([[0.2]]), 0)


def test_normalize_shift_examples():
    np.testing.assert_array_equal(normalize_shift(np.array([0.0, 1.0])), [-0.5, 0.5])
    np.testing.assert_array_equal(normalize_shift(np.array([0.5])), [0.0])


@given(unit_images)
def test_shift_round_trip(img):
    # exact up to one rounding of the intermediate near 0.5
    np.testing.assert_allclose(unshift(normalize_shift(img)), img, rtol=0, atol=2**-53)


# --- borders --------------------------------------------------------------------


def test_pad_symmetric_repeats_edge():
    np.testing.assert_array_equal(pad_symmetric(np.array([[1.0, 2.0, 3.0]]), 1)[1], [1, 1, 2, 3, 3])
    img = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(pad_symmetric(img, 0), img)
    with pytest.raises(DomainError):
        pad_symmetric(img, 4)
    with pytest.raises(DomainError):
        pad_symmetric(img, -1)


def test_crop_center_examples():
    assert crop_center(np.zeros((128, 128)), 21).shape == (86, 86)
    img = np.arange(25.0).reshape(5, 5)
    np.testing.assert_array_equal(crop_center(img, 2), [[12.0]])
    assert crop_center(img, 0) is img
    with pytest.raises(DomainError):
        crop_center(img, 3)


@given(unit_images, st.integers(0, 12))
def test_pad_then_crop_is_identity(img, m):
    m = min(m, min(img.shape))
    np.testing.assert_array_equal(crop_center(pad_symmetric(img, m), m), img)


# --- metrics ---------------------------------------------------------------------


def test_psnr_examples():
    a = np.full((4, 4), 0.3)
    assert psnr(a, a, 1.0) == PSNR_CAP_DB
    assert psnr(a, a + 0.1, 1.0) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(DomainError):
        psnr(a, np.zeros((4, 5)), 1.0)


@settings(max_examples=50)
@given(unit_images, unit_images, st.floats(0.1, 100.0))
def test_psnr_symmetric_and_scale_invariant(a, b, c):
    if a.shape != b.shape:
        b = np.resize(b, a.shape)
    p = psnr(a, b, 1.0)
    assert p == psnr(b, a, 1.0)
    if p < PSNR_CAP_DB:
        assert psnr(a * c, b * c, c) == pytest.approx(p, rel=1e-9)


def test_rmse_examples():
    a = np.array([[0.0, 1.0]])
    assert rmse(a, a) == 0.0
    assert rmse(a, a + 0.5) == pytest.approx(0.5)
    assert rmse(a, a[:, ::-1]) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        rmse(a, np.zeros((2, 2)))
