import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from retouchattack.imagecore import ColorState, ImageError, ImageTensor, rgb_to_lab
from retouchattack.palettemask import (
    PaletteMasker,
    composite,
    composite_backward,
    compute_masks,
    extract_palette,
)


def linear(data):
    return ImageTensor(np.asarray(data, dtype=float), ColorState.LINEAR_SRGB)


def two_color_image():
    img = np.zeros((6, 6, 3))
    img[:, :3] = [0.8, 0.2, 0.1]
    img[:, 3:] = [0.1, 0.3, 0.7]
    return img


def test_two_colors_recovered():
    img = two_color_image()
    palette = extract_palette(linear(img), k=2, seed=3)
    expected = rgb_to_lab(np.array([[0.8, 0.2, 0.1], [0.1, 0.3, 0.7]]))
    expected = expected[np.argsort(expected[:, 0])]
    np.testing.assert_allclose(palette, expected, atol=1e-6)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_constant_image_palette(k):
    img = np.full((4, 4, 3), 0.42)
    palette = extract_palette(linear(img), k=k)
    np.testing.assert_allclose(palette, np.broadcast_to(rgb_to_lab(img[0, 0]), (k, 3)), atol=1e-9)
    np.testing.assert_array_equal(compute_masks(linear(img), palette), 1.0)


def test_palette_deterministic_and_sorted(rng):
    img = linear(rng.random((10, 10, 3)))
    a = extract_palette(img, 5, seed=7)
    b = extract_palette(img, 5, seed=7)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.diff(a[:, 0]) >= 0)


def test_palette_rejects_bad_input():
    with pytest.raises(ImageError):
        extract_palette(ImageTensor(np.zeros((2, 2, 3))), 2)
    with pytest.raises(ValueError):
        extract_palette(linear(np.zeros((2, 2, 3))), 0)


def test_mask_endpoints(rng):
    img = rng.random((8, 8, 3))
    lab = rgb_to_lab(img)
    palette = lab[2, 5][None]
    mask = compute_masks(linear(img), palette)[0]
    assert mask[2, 5] == 1.0
    far = np.unravel_index(np.argmax(np.linalg.norm(lab - palette[0], axis=-1)), mask.shape)
    assert mask[far] == 0.0
    assert mask.min() >= 0.0 and mask.max() <= 1.0


def test_masks_tile_invariant(rng):
    img = rng.random((5, 4, 3))
    palette = extract_palette(linear(img), 3)
    tiled = np.tile(img, (2, 2, 1))
    np.testing.assert_allclose(compute_masks(linear(tiled), palette), np.tile(compute_masks(linear(img), palette), (1, 2, 2)))


def test_composite_examples(rng):
    base, ret = rng.random((3, 3, 3)), rng.random((3, 3, 3))
    np.testing.assert_array_equal(composite(base, ret, np.ones((3, 3))), ret)
    np.testing.assert_array_equal(composite(base, ret, np.zeros((3, 3))), base)
    out = composite(np.full((3, 3, 3), 0.2), np.full((3, 3, 3), 0.6), np.full((3, 3), 0.5))
    np.testing.assert_allclose(out, 0.4)
    with pytest.raises(ValueError):
        composite(base, ret, np.ones((2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composite_convex(seed):
    rng = np.random.default_rng(seed)
    base, ret, mask = rng.random((4, 4, 3)), rng.random((4, 4, 3)), rng.random((4, 4))
    out = composite(base, ret, mask)
    assert np.all(out >= np.minimum(base, ret) - 1e-15)
    assert np.all(out <= np.maximum(base, ret) + 1e-15)


def test_composite_vjp(rng):
    base, ret, mask = rng.random((4, 4, 3)), rng.random((4, 4, 3)), rng.random((4, 4))
    w = rng.standard_normal(base.shape)
    d_base, d_ret = composite_backward(mask, w)
    num_b = central_diff(lambda b: np.sum(w * composite(b, ret, mask)), base, range(base.size))
    num_r = central_diff(lambda r: np.sum(w * composite(base, r, mask)), ret, range(ret.size))
    assert rel_err(d_base, num_b) <= 1e-6
    assert rel_err(d_ret, num_r) <= 1e-6


def test_estimator_api(rng):
    img = rng.random((6, 6, 3))
    masker = PaletteMasker(n_colors=3, random_state=1)
    masks = masker.fit_transform(img)
    assert masker.palette_.shape == (3, 3)
    assert masks.shape == (3, 6, 6)
    assert masker.get_params()["n_colors"] == 3
    with pytest.raises(Exception):
        PaletteMasker().transform(img)
