import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebsel import fusion
from ebsel.imaging import ImageError, LdrImage, LUMA


def _img(a):
    return LdrImage(np.asarray(a, dtype=np.float64))


def _stack(seed, k=3, h=32, w=32):
    rng = np.random.default_rng(seed)
    base = rng.random((h, w, 3))
    return [_img(np.clip(base * s, 0, 1)) for s in np.geomspace(2.0, 0.25, k)]


def _direct_weights(stack):
    """Quality weights from explicit stencils, independent of scipy."""
    out = []
    for im in stack:
        p = im.pixels.astype(np.float64)
        lum = p @ LUMA
        q = np.pad(lum, 1, mode="symmetric")
        lap = q[:-2, 1:-1] + q[2:, 1:-1] + q[1:-1, :-2] + q[1:-1, 2:] - 4 * lum
        mu = p.mean(axis=2, keepdims=True)
        sat = np.sqrt(((p - mu) ** 2).mean(axis=2))
        well = np.exp(-((p - 0.5) ** 2) / 0.08).prod(axis=2)
        out.append(np.abs(lap) * sat * well + fusion.WEIGHT_FLOOR)
    w = np.stack(out)
    return w / w.sum(axis=0)


class TestWeights:
    def test_white_well_exposedness(self):
        # exp(-(0.5^2) / (2 * 0.2^2)) per channel, cubed.
        w = fusion.well_exposedness(np.ones((1, 1, 3)))
        assert w[0, 0] == pytest.approx(8.481823524646918e-05, rel=1e-12)

    def test_matches_direct_oracle(self):
        stack = _stack(0)
        np.testing.assert_allclose(fusion.normalized_weights(stack), _direct_weights(stack), rtol=1e-9, atol=1e-12)

    @given(st.integers(0, 10_000), st.integers(1, 5))
    @settings(max_examples=20, deadline=None)
    def test_weights_sum_to_one(self, seed, k):
        w = fusion.normalized_weights(_stack(seed, k, 16, 16))
        np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-6)
        assert (w >= 0).all()

    def test_flat_images_fall_back_to_uniform(self):
        # Zero contrast everywhere leaves only the floor, so weights are equal.
        stack = [_img(np.full((8, 8, 3), v)) for v in (0.2, 0.5, 0.8)]
        np.testing.assert_allclose(fusion.normalized_weights(stack), 1 / 3, atol=1e-12)

    def test_negative_exponent_rejected(self):
        with pytest.raises(ValueError):
            fusion.quality_weights(_stack(0)[0], (1.0, -1.0, 1.0))


class TestPyramid:
    @given(st.integers(0, 1000), st.integers(1, 4))
    @settings(max_examples=20, deadline=None)
    def test_laplacian_collapse_is_exact(self, seed, levels):
        a = np.random.default_rng(seed).random((40, 24, 3))
        np.testing.assert_allclose(fusion.collapse(fusion.laplacian_pyramid(a, levels)), a, atol=1e-12)

    def test_gaussian_shapes(self):
        pyr = fusion.gaussian_pyramid(np.zeros((33, 20)), 4)
        assert [p.shape for p in pyr] == [(33, 20), (17, 10), (9, 5), (5, 3)]


class TestExposureFuse:
    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_identical_inputs(self, k):
        img = _stack(4, 1)[0]
        out = fusion.exposure_fuse([img] * k)
        np.testing.assert_allclose(out.pixels, img.pixels, atol=1e-6)

    def test_single_level_is_weighted_average(self):
        stack = _stack(5)
        w = _direct_weights(stack)
        expect = sum(wi[..., None] * im.pixels.astype(np.float64) for wi, im in zip(w, stack))
        out = fusion.exposure_fuse(stack, levels=1)
        np.testing.assert_allclose(out.pixels, np.clip(expect, 0, 1), atol=1e-6)

    def test_output_in_range(self):
        out = fusion.exposure_fuse(_stack(6, 4, 64, 48))
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1

    def test_size_mismatch(self):
        with pytest.raises(ImageError):
            fusion.exposure_fuse([_img(np.zeros((8, 8, 3))), _img(np.zeros((8, 16, 3)))])

    def test_empty_stack(self):
        with pytest.raises(ImageError):
            fusion.exposure_fuse([])

    def test_bad_levels(self):
        with pytest.raises(ValueError):
            fusion.exposure_fuse(_stack(0), levels=99)
