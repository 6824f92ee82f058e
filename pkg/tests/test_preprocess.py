import numpy as np
import pytest

from teethseg.data import generate_synthetic
from teethseg.preprocess import (
    closing,
    dilate,
    erode,
    multiscale_enhance,
    normalize,
    opening,
    preprocess_image,
    resize_bilinear,
    resize_nearest,
)


def brute_filter(img, r, reduce):
    """Square min/max filter with edge replication, one pixel at a time."""
    h, w = img.shape
    out = np.empty_like(img, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            ys = np.clip(np.arange(i - r, i + r + 1), 0, h - 1)
            xs = np.clip(np.arange(j - r, j + r + 1), 0, w - 1)
            out[i, j] = reduce(img[np.ix_(ys, xs)])
    return out


def brute_bilinear(img, out_w, out_h):
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(42)
    return [rng.uniform(0, 255, size=(rng.integers(3, 12), rng.integers(3, 12))) for _ in range(50)]


class TestResize:
    def test_identity(self):
        img = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(resize_bilinear(img, 4, 3), img)

    @pytest.mark.parametrize("w,h", [(1, 1), (7, 3), (16, 9)])
    def test_constant(self, w, h):
        assert np.allclose(resize_bilinear(np.full((4, 5), 37.0), w, h), 37.0, atol=1e-12)

    def test_half_pixel_upsample(self):
        out = resize_bilinear(np.array([[0.0, 255.0]]), 4, 1)
        assert np.allclose(out, [[0.0, 63.75, 191.25, 255.0]], atol=1e-12)

    @pytest.mark.parametrize("shape,out", [((5, 7), (11, 3)), ((8, 8), (4, 4)), ((3, 9), (9, 3))])
    def test_matches_brute_force(self, shape, out):
        img = np.random.default_rng(1).uniform(0, 255, size=shape)
        assert np.allclose(resize_bilinear(img, *out), brute_bilinear(img, *out), atol=1e-10)

    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError, match="extents"):
            resize_bilinear(np.ones((2, 2)), 0, 3)

    def test_nearest_keeps_labels(self):
        mask = np.random.default_rng(0).integers(0, 33, size=(8, 16)).astype(np.uint8)
        out = resize_nearest(mask, 4, 2)
        assert out.dtype == np.uint8
        assert set(np.unique(out)) <= set(np.unique(mask))
        assert np.array_equal(resize_nearest(mask, 16, 8), mask)
        # integer downsample picks block centres
        assert np.array_equal(resize_nearest(mask, 8, 4), mask[1::2, 1::2])


class TestNormalize:
    def test_already_full_range(self):
        assert np.array_equal(normalize(np.array([0.0, 255.0])), [0.0, 255.0])

    def test_constant_maps_to_zero(self):
        assert np.array_equal(normalize(np.full((3, 3), 7.0)), np.zeros((3, 3)))

    def test_affine(self):
        assert np.allclose(normalize(np.array([10.0, 20.0, 30.0])), [0.0, 127.5, 255.0], atol=1e-12)


class TestMorphology:
    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_filters_match_brute_force(self, images, r):
        for img in images[:10]:
            assert np.array_equal(erode(img, r), brute_filter(img, r, np.min))
            assert np.array_equal(dilate(img, r), brute_filter(img, r, np.max))

    @pytest.mark.parametrize("op", [erode, dilate, opening, closing])
    def test_constant_fixpoint(self, op):
        img = np.full((6, 9), 113.0)
        assert np.array_equal(op(img, 2), img)

    def test_impulse_dilation(self):
        img = np.zeros((7, 7))
        img[3, 3] = 200.0
        expected = np.zeros((7, 7))
        expected[2:5, 2:5] = 200.0
        assert np.array_equal(dilate(img, 1), expected)

    @pytest.mark.parametrize("r", [1, 2])
    def test_ordering_laws(self, images, r):
        for img in images:
            assert np.all(erode(img, r) <= img) and np.all(img <= dilate(img, r))
            assert np.all(opening(img, r) <= img) and np.all(img <= closing(img, r))

    @pytest.mark.parametrize("op", [erode, dilate, opening, closing])
    def test_monotone(self, images, op):
        rng = np.random.default_rng(3)
        for img in images:
            bigger = img + rng.uniform(0, 30, size=img.shape)
            assert np.all(op(img, 1) <= op(bigger, 1))

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_opening_closing_idempotent(self, images, r):
        for img in images:
            once = opening(img, r)
            assert np.array_equal(opening(once, r), once)
            shut = closing(img, r)
            assert np.array_equal(closing(shut, r), shut)

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError, match="radius"):
            erode(np.ones((3, 3)), 0)


class TestEnhance:
    def test_constant_unchanged(self):
        img = np.full((8, 8), 90.0)
        assert np.array_equal(multiscale_enhance(img), img)

    def test_single_bright_pixel(self):
        img = np.zeros((9, 9))
        img[4, 4] = 200.0
        out = multiscale_enhance(img, [1])
        assert out[4, 4] == 255.0
        out[4, 4] = 0.0
        assert np.array_equal(out, np.zeros((9, 9)))

    def test_matches_top_hat_formula(self, images):
        for img in images[:10]:
            wth = sum(img - opening(img, r) for r in (1, 2))
            bth = sum(closing(img, r) - img for r in (1, 2))
            assert np.allclose(multiscale_enhance(img, [1, 2]), np.clip(img + wth - bth, 0, 255), atol=1e-12)

    def test_output_range(self, images):
        for img in images:
            out = multiscale_enhance(img)
            assert out.min() >= 0.0 and out.max() <= 255.0

    @pytest.mark.parametrize("radii", [[], [2, 1], [1, 1]])
    def test_bad_radii(self, radii):
        with pytest.raises(ValueError, match="radii"):
            multiscale_enhance(np.ones((4, 4)), radii)

    def test_variance_not_reduced_on_corpus(self):
        for s in generate_synthetic(16, seed=5, w=64, h=32):
            base = normalize(s.image)
            assert multiscale_enhance(base).var() >= base.var() - 1e-9


class TestPipeline:
    def test_deterministic_and_in_range(self):
        img = generate_synthetic(1, seed=2, w=96, h=48)[0].image
        a = preprocess_image(img, 64, 32)
        b = preprocess_image(img, 64, 32)
        assert a.shape == (32, 64)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 255

    def test_empty_radii_skips_enhancement(self):
        img = np.random.default_rng(0).uniform(0, 255, size=(16, 16))
        assert np.array_equal(preprocess_image(img, 8, 8, []), normalize(resize_bilinear(img, 8, 8)))

    def test_constant_corpus_unchanged_after_normalize(self):
        # a constant image normalizes to 0 and stays there
        assert np.array_equal(preprocess_image(np.full((10, 20), 60.0), 20, 10), np.zeros((10, 20)))
