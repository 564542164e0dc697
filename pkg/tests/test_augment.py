import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfdocseg.augment import (AugmentConfig, JitterStrengths, apply_jitter, color_drop,
                                color_jitter, gaussian_blur, gaussian_kernel, make_view_pair,
                                solarize)
from selfdocseg.docgen import PageSpec, generate_document
from selfdocseg.maskgen import generate_layout_mask, to_grayscale
from selfdocseg.seeding import stream


def brute_blur(img, sigma):
    radius = max(1, math.ceil(3 * sigma))
    taps = [math.exp(-0.5 * (t / sigma) ** 2) for t in range(-radius, radius + 1)]
    s = sum(taps)
    taps = [t / s for t in taps]
    H, W, C = img.shape

    def reflect(i, n):
        # half-sample symmetric padding: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    x = img.astype(np.float64)
    tmp = np.zeros_like(x)
    for i in range(H):
        for k, t in enumerate(taps):
            tmp[i] += t * x[reflect(i + k - radius, H)]
    out = np.zeros_like(x)
    for j in range(W):
        for k, t in enumerate(taps):
            out[:, j] += t * tmp[:, reflect(j + k - radius, W)]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def random_image(seed=0, shape=(9, 11)):
    return np.random.default_rng(seed).integers(0, 256, (*shape, 3)).astype(np.uint8)


def test_blur_constant_image():
    img = np.full((12, 12, 3), 77, np.uint8)
    for sigma in (0.3, 1.0, 2.5):
        assert np.array_equal(gaussian_blur(img, sigma), img)


def test_blur_small_sigma_near_identity():
    img = random_image(1, (20, 20))
    out = gaussian_blur(img, 0.1)
    assert len(gaussian_kernel(0.1)) == 3
    assert np.abs(out.astype(int) - img.astype(int)).max() <= 1


@pytest.mark.parametrize("sigma", [0.1, 0.5, 1.3, 2.0])
def test_blur_matches_brute_force(sigma):
    img = random_image(2)
    assert np.array_equal(gaussian_blur(img, sigma), brute_blur(img, sigma))


@pytest.mark.parametrize("sigma", [0.1, 0.7, 2.0, 5.0])
def test_kernel_normalized(sigma):
    k = gaussian_kernel(sigma)
    assert abs(k.sum() - 1) < 1e-9
    assert len(k) == 2 * max(1, math.ceil(3 * sigma)) + 1


def test_blur_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(random_image(), 0.0)


def test_jitter_zero_strength_identity():
    img = random_image(3)
    out = color_jitter(img, JitterStrengths(0, 0, 0, 0), np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_brightness_zero_black():
    img = random_image(4)
    assert not apply_jitter(img, [("brightness", 0.0)]).any()


def test_jitter_reproducible():
    img = random_image(5)
    a = color_jitter(img, JitterStrengths(), np.random.default_rng(9))
    b = color_jitter(img, JitterStrengths(), np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert a.dtype == np.uint8 and a.shape == img.shape


def test_color_drop():
    gray_img = np.repeat(random_image(6)[..., :1], 3, axis=2)
    assert np.array_equal(color_drop(gray_img), gray_img)
    out = color_drop(random_image(7))
    assert (out[..., 0] == out[..., 1]).all() and (out[..., 1] == out[..., 2]).all()
    red = np.array([[[255, 0, 0]]], np.uint8)
    assert color_drop(red).tolist() == [[[54, 54, 54]]]
    assert color_drop(red)[0, 0, 0] == to_grayscale(red)[0, 0]


def test_solarize():
    img = random_image(8)
    assert np.array_equal(solarize(img, 256), img)
    assert np.array_equal(solarize(img, 0), 255 - img)
    assert solarize(np.array([[[200, 100, 128]]], np.uint8), 128).tolist() == [[[55, 100, 127]]]


def test_view_pair_all_probs_zero():
    img = random_image(9)
    cfg = AugmentConfig(blur_prob=0, jitter_prob=0, drop_prob=0, solarize_prob=0)
    v1, v2 = make_view_pair(img, cfg, np.random.default_rng(0))
    assert np.array_equal(v1, img) and np.array_equal(v2, img)


def test_view_pair_reproducible():
    img = random_image(10, (32, 32))
    a = make_view_pair(img, AugmentConfig(), np.random.default_rng(3))
    b = make_view_pair(img, AugmentConfig(), np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_view_geometry_preserved(seed):
    image, _ = generate_document(PageSpec(64, 64, (1, 2)), stream(seed, "aug"))
    cfg = AugmentConfig(blur_prob=1, jitter_prob=1, drop_prob=0.5, solarize_prob=0.5)
    v1, v2 = make_view_pair(image, cfg, np.random.default_rng(seed))
    assert v1.shape == v2.shape == image.shape
    assert v1.dtype == v2.dtype == np.uint8
    # the source layout mask stays a valid 64x64 binary mask for both views
    m = generate_layout_mask(image)
    assert m.shape == v1.shape[:2]


def test_solarize_only_second_view():
    img = np.full((8, 8, 3), 250, np.uint8)
    cfg = AugmentConfig(blur_prob=0, jitter_prob=0, drop_prob=0, solarize_prob=1.0)
    v1, v2 = make_view_pair(img, cfg, np.random.default_rng(0))
    assert np.array_equal(v1, img)
    assert (v2 == 5).all()


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(blur_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(blur_sigma_range=(0.0, 1.0))
