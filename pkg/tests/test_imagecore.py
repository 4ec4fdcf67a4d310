import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, rel_err
from retouchattack.imagecore import (
    ColorState,
    ImageError,
    ImageTensor,
    encode_png,
    hsv_to_rgb,
    hsv_to_rgb_vjp,
    linear_to_srgb,
    linear_to_srgb_array,
    linear_to_srgb_vjp,
    load_png,
    rgb_to_hsv,
    rgb_to_hsv_vjp,
    rgb_to_lab,
    rgb_to_lab_vjp,
    save_png,
    srgb_to_linear,
    srgb_to_linear_array,
    srgb_to_linear_vjp,
)


def _raw_png(pixels: np.ndarray, color_type=2, depth=8, filter_byte=0) -> bytes:
    h, w, c = pixels.shape
    dtype = ">u2" if depth == 16 else np.uint8
    rows = [bytes([filter_byte]) + pixels[y].astype(dtype).tobytes() for y in range(h)]

    def chunk(t, body):
        return struct.pack(">I", len(body)) + t + body + struct.pack(">I", zlib.crc32(t + body))

    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, depth, color_type, 0, 0, 0))
        + chunk(b"IDAT", zlib.compress(b"".join(rows)))
        + chunk(b"IEND", b"")
    )


# ------------------------------------------------------------------ PNG I/O


def test_load_solid_red(tmp_path):
    p = tmp_path / "red.png"
    p.write_bytes(_raw_png(np.tile(np.array([255, 0, 0], np.uint8), (2, 2, 1))))
    img = load_png(p)
    assert img.state is ColorState.NONLINEAR_SRGB
    np.testing.assert_array_equal(img.data, np.tile([1.0, 0.0, 0.0], (2, 2, 1)))


def test_load_mid_byte(tmp_path):
    p = tmp_path / "g.png"
    p.write_bytes(_raw_png(np.full((1, 1, 3), 128, np.uint8)))
    np.testing.assert_allclose(load_png(p).data, 128 / 255)
    assert abs(128 / 255 - 0.50196) < 1e-5


def test_load_rgba_and_16bit(tmp_path):
    rgba = np.array([[[10, 20, 30, 0], [40, 50, 60, 255]]], np.uint8)
    (tmp_path / "a.png").write_bytes(_raw_png(rgba, color_type=6))
    np.testing.assert_allclose(load_png(tmp_path / "a.png").data, rgba[..., :3] / 255)
    deep = np.array([[[0, 32768, 65535]]], np.uint16)
    (tmp_path / "d.png").write_bytes(_raw_png(deep, depth=16))
    np.testing.assert_allclose(load_png(tmp_path / "d.png").data, deep / 65535)


def _reference_unfilter(residual: np.ndarray, filter_byte: int, bpp: int = 3) -> np.ndarray:
    """Byte-by-byte PNG reconstruction, written straight from the filter definitions."""
    h, stride = residual.shape
    out = np.zeros((h, stride), dtype=np.int64)
    for y in range(h):
        for i in range(stride):
            a = out[y, i - bpp] if i >= bpp else 0
            b = out[y - 1, i] if y > 0 else 0
            c = out[y - 1, i - bpp] if (y > 0 and i >= bpp) else 0
            if filter_byte == 1:
                pred = a
            elif filter_byte == 2:
                pred = b
            elif filter_byte == 3:
                pred = (a + b) // 2
            else:
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
            out[y, i] = (int(residual[y, i]) + pred) % 256
    return out


@pytest.mark.parametrize("filter_byte", [1, 2, 3, 4])
def test_png_filters_decode(tmp_path, filter_byte, rng):
    residual = rng.integers(0, 256, (3, 4, 3), dtype=np.uint8)
    p = tmp_path / "f.png"
    p.write_bytes(_raw_png(residual, filter_byte=filter_byte))
    expected = _reference_unfilter(residual.reshape(3, 12), filter_byte).reshape(3, 4, 3) / 255
    np.testing.assert_array_equal(load_png(p).data, expected)


def test_truncated_png_raises(tmp_path):
    raw = _raw_png(np.full((4, 4, 3), 77, np.uint8))
    p = tmp_path / "t.png"
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ImageError, match="t.png"):
        load_png(p)


def test_bad_crc_and_signature(tmp_path):
    raw = bytearray(_raw_png(np.zeros((2, 2, 3), np.uint8)))
    raw[20] ^= 0xFF
    (tmp_path / "c.png").write_bytes(bytes(raw))
    with pytest.raises(ImageError):
        load_png(tmp_path / "c.png")
    (tmp_path / "s.png").write_bytes(b"GIF89a" + bytes(40))
    with pytest.raises(ImageError):
        load_png(tmp_path / "s.png")


def test_missing_file():
    with pytest.raises(ImageError, match="cannot read"):
        load_png("/nonexistent/x.png")


def test_save_load_quantization(tmp_path, rng):
    img = ImageTensor(rng.random((7, 5, 3)))
    save_png(img, tmp_path / "o.png")
    back = load_png(tmp_path / "o.png")
    assert np.max(np.abs(back.data - img.data)) <= 1 / 255
    assert not (tmp_path / "o.png.part").exists()


def test_save_zero_image_bytes():
    raw = encode_png(ImageTensor(np.zeros((3, 3, 3))))
    idat_len = struct.unpack(">I", raw[33:37])[0]
    rows = zlib.decompress(raw[41 : 41 + idat_len])
    assert set(rows) == {0}


def test_save_linear_rejected(tmp_path):
    with pytest.raises(ImageError):
        save_png(ImageTensor(np.zeros((2, 2, 3)), ColorState.LINEAR_SRGB), tmp_path / "x.png")
    assert not list(tmp_path.iterdir())


def test_tensor_validation():
    with pytest.raises(ImageError):
        ImageTensor(np.zeros((2, 2)))
    with pytest.raises(ImageError):
        ImageTensor(np.full((1, 1, 3), np.nan))
    t = ImageTensor(np.full((1, 1, 3), 1.5))
    assert t.data.max() == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0, 0] = 0.0


# ------------------------------------------------------------------- gamma


def test_gamma_values():
    assert srgb_to_linear_array(0.0) == 0.0
    assert srgb_to_linear_array(1.0) == pytest.approx(1.0, abs=1e-12)
    assert srgb_to_linear_array(0.04) == pytest.approx(0.0030960, abs=1e-7)
    assert srgb_to_linear_array(0.5) == pytest.approx(0.21404, abs=1e-5)
    assert linear_to_srgb_array(0.0) == 0.0
    assert linear_to_srgb_array(1.0) == pytest.approx(1.0, abs=1e-12)
    assert linear_to_srgb_array(0.0030960) == pytest.approx(0.04, abs=1e-6)


def test_gamma_round_trip_and_monotone(rng):
    v = rng.random(1000)
    assert np.max(np.abs(linear_to_srgb_array(srgb_to_linear_array(v)) - v)) < 1e-6
    assert np.max(np.abs(srgb_to_linear_array(linear_to_srgb_array(v)) - v)) < 1e-6
    grid = np.linspace(0, 1, 10_000)
    assert np.all(np.diff(srgb_to_linear_array(grid)) >= 0)
    assert np.all(np.diff(linear_to_srgb_array(grid)) >= 0)


def test_gamma_tensor_states():
    img = ImageTensor(np.full((1, 1, 3), 0.5))
    lin = srgb_to_linear(img)
    assert lin.state is ColorState.LINEAR_SRGB
    with pytest.raises(ImageError):
        srgb_to_linear(lin)
    assert linear_to_srgb(lin).state is ColorState.NONLINEAR_SRGB


def test_gamma_vjps(rng):
    x = rng.uniform(0.01, 0.99, (4, 4, 3))
    w = rng.standard_normal(x.shape)
    coords = range(x.size)
    for fwd, vjp in ((srgb_to_linear_array, srgb_to_linear_vjp), (linear_to_srgb_array, linear_to_srgb_vjp)):
        num = central_diff(lambda y: np.sum(w * fwd(y)), x, coords)
        assert rel_err(vjp(x, w), num) < 1e-6


# --------------------------------------------------------------------- HSV


def test_hsv_pure_red_and_gray():
    h, s, v = rgb_to_hsv(np.array([1.0, 0.0, 0.0]))
    assert (h, s, v) == (0.0, 1.0, 1.0)
    h, s, v = rgb_to_hsv(np.array([0.3, 0.3, 0.3]))
    assert (h, s, v) == (0.0, 0.0, 0.3)


def test_hsv_round_trip(rng):
    p = rng.random((1000, 3))
    assert np.max(np.abs(hsv_to_rgb(*rgb_to_hsv(p)) - p)) < 1e-6


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(0, 1)))
def test_hsv_ranges(p):
    h, s, v = rgb_to_hsv(p)
    assert 0 <= h < 2 * np.pi and 0 <= s <= 1 and 0 <= v <= 1
    back = hsv_to_rgb(h, s, v)
    assert np.all((back >= -1e-12) & (back <= 1 + 1e-12))
    if s > 0:
        np.testing.assert_allclose(back, p, atol=1e-6)


def test_hsv_vjps(rng):
    x = rng.uniform(0.05, 0.95, (5, 5, 3))
    gh, gs, gv = (rng.standard_normal(x.shape[:2]) for _ in range(3))

    def f(y):
        h, s, v = rgb_to_hsv(y)
        return np.sum(gh * h + gs * s + gv * v)

    num = central_diff(f, x, range(x.size), h=1e-7)
    assert rel_err(rgb_to_hsv_vjp(x, gh, gs, gv), num) < 1e-5

    h, s, v = rgb_to_hsv(x)
    w = rng.standard_normal(x.shape)
    dh, ds, dv = hsv_to_rgb_vjp(h, s, v, w)
    for arr, grad in ((h, dh), (s, ds), (v, dv)):
        def g(a, arr=arr):
            args = [a if arr is ref else ref for ref in (h, s, v)]
            return np.sum(w * hsv_to_rgb(*args))
        assert rel_err(grad, central_diff(g, arr, range(arr.size), h=1e-7)) < 1e-5


# --------------------------------------------------------------------- Lab


def test_lab_reference_points():
    np.testing.assert_allclose(rgb_to_lab(np.zeros(3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(rgb_to_lab(np.ones(3)), [100, 0, 0], atol=1e-3)
    lab = rgb_to_lab(np.full(3, 0.5))
    assert lab[0] == pytest.approx(76.07, abs=0.01)
    np.testing.assert_allclose(lab[1:], 0, atol=1e-6)
    gray = rgb_to_lab(srgb_to_linear_array(np.full(3, 0.5)))
    assert gray[0] == pytest.approx(53.39, abs=0.01)


def test_lab_ranges_and_vjp(rng):
    x = rng.random((2000, 3))
    lab = rgb_to_lab(x)
    assert lab[:, 0].min() >= 0 and lab[:, 0].max() <= 100 + 1e-9
    assert np.all(np.abs(lab[:, 1:]) <= 128)
    y = rng.uniform(0.0, 1.0, (4, 4, 3))
    w = rng.standard_normal(y.shape)
    num = central_diff(lambda z: np.sum(w * rgb_to_lab(z)), y, range(y.size))
    assert rel_err(rgb_to_lab_vjp(y, w), num) < 1e-6
