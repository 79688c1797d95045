from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from radar_perceive.errors import FormatError, InvalidInputError
from radar_perceive.imaging import (CartesianImage, PolarFrame, PolarImage, RadarParams, crop_window,
                                    full_spectrum, load_raster, polar_to_cartesian, range_fft,
                                    resize_array, resize_bilinear, save_raster, whiten)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def direct_dft_power(signal: np.ndarray) -> np.ndarray:
    n = len(signal)
    k = np.arange(n)
    out = []
    for j in range(n):
        s = np.sum(signal * np.exp(-2j * np.pi * j * k / n))
        out.append(abs(s) ** 2)
    return np.array(out)


# -- RadarParams -------------------------------------------------------------

def test_default_params_consistent():
    p = RadarParams()
    assert p.range_resolution == pytest.approx(299_792_458.0 / (2 * 20e9), rel=0.01)


@pytest.mark.parametrize("field", ["sweep_bandwidth", "range_resolution", "azimuth_beamwidth",
                                   "azimuth_step", "max_range"])
def test_params_must_be_positive(field):
    with pytest.raises(InvalidInputError):
        RadarParams(**{field: 0.0})


def test_params_resolution_must_match_bandwidth():
    with pytest.raises(InvalidInputError):
        RadarParams(range_resolution=0.01)


# -- range_fft -----------------------------------------------------------------

def test_dc_sweep_puts_all_power_in_bin_zero():
    n, a = 16, 2.5
    img = range_fft(PolarFrame(np.full((1, n), a)))
    assert img.num_range_bins == n // 2
    assert img.power[0, 0] == pytest.approx((n * a) ** 2)
    np.testing.assert_allclose(img.power[0, 1:], 0.0, atol=1e-9)


def test_sinusoid_matches_direct_dft():
    n, k = 16, 3
    t = np.arange(n)
    sig = np.cos(2 * np.pi * k * t / n)
    img = range_fft(PolarFrame(sig[None]))
    assert img.power[0, k] == pytest.approx((n / 2) ** 2)
    np.testing.assert_allclose(img.power[0], direct_dft_power(sig)[: n // 2], atol=1e-9)


def test_two_tones_add():
    n = 32
    t = np.arange(n)
    s1 = np.cos(2 * np.pi * 3 * t / n)
    s2 = 0.5 * np.sin(2 * np.pi * 7 * t / n)
    p = range_fft(PolarFrame((s1 + s2)[None])).power
    p1 = range_fft(PolarFrame(s1[None])).power
    p2 = range_fft(PolarFrame(s2[None])).power
    np.testing.assert_allclose(p, p1 + p2, atol=1e-9)


def test_odd_length_bins():
    assert range_fft(PolarFrame(np.ones((2, 7)))).num_range_bins == 3


@pytest.mark.parametrize("data", [np.zeros((0, 8)), np.zeros((3, 1)), np.zeros(8)])
def test_range_fft_rejects_empty(data):
    with pytest.raises(InvalidInputError):
        range_fft(PolarFrame(data))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 64)), elements=finite))
def test_parseval(data):
    spectrum = full_spectrum(PolarFrame(data))
    n = data.shape[1]
    lhs = np.sum(data ** 2)
    rhs = np.sum(np.abs(spectrum) ** 2) / n
    assert rhs == pytest.approx(lhs, rel=1e-6, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 40)), elements=finite))
def test_range_power_nonnegative(data):
    assert np.all(range_fft(PolarFrame(data)).power >= 0)


# -- polar_to_cartesian ------------------------------------------------------

def small_params(max_range: float = 0.12) -> RadarParams:
    return RadarParams(azimuth_step=5.0, max_range=max_range)


def direct_polar_sample(power: np.ndarray, params: RadarParams, x: float, y: float) -> float:
    """Bilinear sample of ``power`` at ``(x, y)``, evaluated cell by cell."""
    n_az, n_bins = power.shape
    r = math.hypot(x, y)
    theta = math.degrees(math.atan2(x, y))
    fr = r / params.range_resolution
    fa = theta / params.azimuth_step + (n_az - 1) / 2.0
    if fa < -1e-9 or fa > n_az - 1 + 1e-9 or fr > n_bins - 1 + 1e-9 or r > params.max_range + 1e-9:
        return 0.0
    fa = min(max(fa, 0.0), n_az - 1)
    fr = min(max(fr, 0.0), n_bins - 1)
    total = 0.0
    for a in range(n_az):
        wa = max(0.0, 1.0 - abs(fa - a))
        for b in range(n_bins):
            wb = max(0.0, 1.0 - abs(fr - b))
            total += wa * wb * power[a, b]
    return total


def test_polar_matches_direct_oracle():
    params = small_params()
    power = np.random.default_rng(3).uniform(0, 5, size=(8, 16))
    cart = polar_to_cartesian(PolarImage(power, params), 0.01)
    for row in range(cart.rows):
        for col in range(cart.cols):
            x, y = cart.cell_to_xy(row, col)
            expected = direct_polar_sample(power, params, float(x), float(y))
            assert cart.values[row, col] == pytest.approx(expected, rel=1e-6, abs=1e-9)


def test_boresight_peak_lands_at_range():
    params = RadarParams(azimuth_step=1.0, max_range=0.3)
    power = np.zeros((9, 40))
    power[4, 30] = 1.0
    cart = polar_to_cartesian(PolarImage(power, params), params.range_resolution)
    row, col = np.unravel_index(np.argmax(cart.values), cart.shape)
    x, y = cart.cell_to_xy(row, col)
    assert abs(float(x)) <= cart.cell_size
    assert abs(float(y) - 30 * params.range_resolution) <= cart.cell_size


def test_uniform_polar_gives_uniform_sector():
    params = small_params()
    cart = polar_to_cartesian(PolarImage(np.full((8, 17), 3.0), params), 0.01)
    vals = cart.values[cart.values != 0]
    assert vals.size > 0
    np.testing.assert_allclose(vals, 3.0)


def test_nearest_mode_and_bad_method():
    params = small_params()
    img = PolarImage(np.random.default_rng(0).uniform(size=(8, 16)), params)
    near = polar_to_cartesian(img, 0.01, method="nearest")
    assert set(np.unique(near.values)) <= set(np.unique(img.power)) | {0.0}
    with pytest.raises(InvalidInputError):
        polar_to_cartesian(img, 0.01, method="cubic")
    with pytest.raises(InvalidInputError):
        polar_to_cartesian(img, 0.0)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 12), elements=st.floats(0, 100)))
def test_polar_nonnegative(power):
    cart = polar_to_cartesian(PolarImage(power, small_params(0.08)), 0.01)
    assert np.all(cart.values >= 0)


# -- whiten --------------------------------------------------------------------

def test_whiten_examples():
    img = CartesianImage(np.full((3, 4), 5.0), 1.0)
    np.testing.assert_array_equal(whiten(img).values, 0.0)
    np.testing.assert_array_equal(whiten(CartesianImage(np.array([[1.0, 3.0]]), 1.0)).values, [[-1.0, 1.0]])


def test_whiten_dataset_mean():
    img = CartesianImage(np.array([[1.0, 3.0]]), 1.0)
    np.testing.assert_array_equal(whiten(img, mean=1.0).values, [[0.0, 2.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite))
def test_whiten_properties(values):
    img = CartesianImage(values, 0.5)
    w = whiten(img)
    scale = max(1.0, float(np.max(np.abs(values))))
    assert abs(w.values.mean()) <= 1e-9 * scale
    np.testing.assert_allclose(whiten(w).values, w.values, atol=1e-9 * scale)


# -- crop_window ---------------------------------------------------------------

def brute_crop(values: np.ndarray, center, size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=values.dtype)
    top, left = center[0] - size // 2, center[1] - size // 2
    for i in range(size):
        for j in range(size):
            r, c = top + i, left + j
            if 0 <= r < values.shape[0] and 0 <= c < values.shape[1]:
                out[i, j] = values[r, c]
    return out


def test_crop_full_image_identity():
    v = np.arange(25.0).reshape(5, 5)
    img = CartesianImage(v, 0.1, (1.0, 2.0))
    out = crop_window(img, img.center_cell(), 5)
    np.testing.assert_array_equal(out.values, v)
    assert out.origin == img.origin


def test_crop_corner_padding():
    v = np.arange(1.0, 10.0).reshape(3, 3)
    out = crop_window(CartesianImage(v, 1.0), (0, 0), 3).values
    assert out[0, 0] == 0 and out[0, 1] == 0 and out[1, 0] == 0
    np.testing.assert_array_equal(out[1:, 1:], v[:2, :2])


def test_crop_random_matches_gather():
    g = np.random.default_rng(7)
    v = g.standard_normal((20, 20))
    img = CartesianImage(v, 0.25, (-2.5, 1.0))
    for _ in range(50):
        center = (int(g.integers(-5, 25)), int(g.integers(-5, 25)))
        out = crop_window(img, center, 7)
        np.testing.assert_array_equal(out.values, brute_crop(v, center, 7))
        # origin stays metric-consistent: cell (3, 3) of the chip is ``center``
        x, y = out.cell_to_xy(3, 3)
        ex, ey = img.cell_to_xy(*center)
        assert float(x) == pytest.approx(float(ex)) and float(y) == pytest.approx(float(ey))


def test_crop_rejects_zero_size():
    with pytest.raises(InvalidInputError):
        crop_window(CartesianImage(np.zeros((3, 3)), 1.0), (1, 1), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(-3, 12), st.integers(-3, 12))
def test_crop_idempotent(size, r, c):
    v = np.arange(100.0).reshape(10, 10)
    once = crop_window(CartesianImage(v, 1.0), (r, c), size)
    twice = crop_window(once, (size // 2, size // 2), size)
    np.testing.assert_array_equal(once.values, twice.values)


# -- resize_bilinear -----------------------------------------------------------

def test_resize_center_value():
    out = resize_array(np.array([[0.0, 1.0], [2.0, 3.0]]), 3, 3)
    assert out[1, 1] == pytest.approx(1.5)
    np.testing.assert_allclose(out, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]])


def test_resize_identity_bitwise():
    v = np.random.default_rng(0).standard_normal((6, 9)).astype(np.float32)
    out = resize_bilinear(CartesianImage(v, 1.0), 6, 9)
    assert out.values.tobytes() == v.tobytes()


def test_resize_constant():
    out = resize_array(np.full((5, 7), 2.25), 11, 3)
    np.testing.assert_allclose(out, 2.25)


def test_resize_rejects_zero():
    with pytest.raises(InvalidInputError):
        resize_array(np.ones((2, 2)), 0, 2)


def test_resize_cell_size_keeps_span():
    img = CartesianImage(np.zeros((400, 400)), 0.0075, (1.0, 2.0))
    out = resize_bilinear(img, 128, 128)
    assert out.cell_size * 127 == pytest.approx(0.0075 * 399)
    assert out.origin == img.origin


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=finite),
       st.integers(1, 12), st.integers(1, 12))
def test_resize_convex(values, rows, cols):
    out = resize_array(values, rows, cols)
    tol = 1e-9 * max(1.0, float(np.max(np.abs(values))))
    assert out.min() >= values.min() - tol
    assert out.max() <= values.max() + tol


# -- RADR rasters --------------------------------------------------------------

def test_raster_round_trip(tmp_path):
    v = np.random.default_rng(1).standard_normal((4, 6)).astype(np.float32)
    img = CartesianImage(v, 0.0075, (-1.5, 0.25))
    path = tmp_path / "a.radr"
    save_raster(path, img)
    back = load_raster(path)
    assert back.values.tobytes() == v.tobytes()
    assert back.cell_size == img.cell_size and back.origin == img.origin
    raw = path.read_bytes()
    assert raw[:4] == b"RADR" and len(raw) == 4 + 4 * 3 + 8 * 3 + 4 * 24
    save_raster(tmp_path / "b.radr", back)
    assert (tmp_path / "b.radr").read_bytes() == raw


def test_raster_log_scale(tmp_path):
    img = CartesianImage(np.array([[10.0, 0.0]]), 1.0)
    save_raster(tmp_path / "l.radr", img, log_scale=True)
    np.testing.assert_allclose(load_raster(tmp_path / "l.radr").values, [[10.0, -120.0]])


_GOOD_HEADER = struct.pack("<4sIIIddd", b"RADR", 1, 1, 2, 1.0, 0.0, 0.0)


@pytest.mark.parametrize("blob", [b"RAD", b"XXXX" + _GOOD_HEADER[4:] + bytes(8),
                                  struct.pack("<4sIIIddd", b"RADR", 2, 1, 2, 1.0, 0.0, 0.0) + bytes(8),
                                  _GOOD_HEADER + bytes(7)])
def test_raster_format_errors(tmp_path, blob):
    path = tmp_path / "bad.radr"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        load_raster(path)
