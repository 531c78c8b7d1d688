import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebsel import imaging
from ebsel.imaging import (
    Bracketing,
    BracketingCatalog,
    CameraModel,
    ImageError,
    LdrImage,
    RadianceMap,
    apply_camera,
    build_catalog,
    charbonnier,
    downsample,
    psnr,
    span_predicate,
)


def _img(a):
    return LdrImage(np.asarray(a, dtype=np.float64))


class TestCamera:
    def test_gamma_and_quantization(self):
        # 0.25 ** (1 / 2.2) * 255 = 135.79..., which rounds to 136.
        r = RadianceMap(np.full((8, 8, 3), 0.25))
        img = apply_camera(r, 1.0, CameraModel())
        np.testing.assert_allclose(img.pixels, 136 / 255, atol=1e-7)

    def test_exposure_time_scales_radiance(self):
        r = RadianceMap(np.full((8, 8, 3), 0.125))
        a = apply_camera(r, 2.0, CameraModel())
        b = apply_camera(RadianceMap(np.full((8, 8, 3), 0.25)), 1.0, CameraModel())
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_saturates_at_one(self):
        img = apply_camera(RadianceMap(np.full((8, 8, 3), 50.0)), 1.0, CameraModel())
        assert img.pixels.max() == 1.0

    @given(st.floats(1e-4, 10.0), st.floats(1e-3, 4.0))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_time(self, rad, t):
        r = RadianceMap(np.full((8, 8, 3), rad))
        lo = apply_camera(r, t, CameraModel()).pixels
        hi = apply_camera(r, 2 * t, CameraModel()).pixels
        assert (hi >= lo).all()

    def test_rejects_nonpositive_time(self):
        with pytest.raises(ValueError):
            apply_camera(RadianceMap(np.ones((1, 1, 3))), 0.0, CameraModel())

    def test_noise_is_seeded(self):
        cam = CameraModel(noise_sigma_read=0.01, noise_sigma_shot=0.01)
        r = RadianceMap(np.full((8, 8, 3), 0.2))
        a = apply_camera(r, 1.0, cam, rng_seed=3)
        b = apply_camera(r, 1.0, cam, rng_seed=3)
        np.testing.assert_array_equal(a.pixels, b.pixels)


class TestImageTypes:
    def test_ldr_rejects_out_of_range(self):
        with pytest.raises(ImageError):
            _img(np.full((2, 2, 3), 1.5))

    def test_ldr_rejects_nan(self):
        a = np.zeros((2, 2, 3))
        a[0, 0, 0] = np.nan
        with pytest.raises(ImageError):
            _img(a)

    def test_ldr_rejects_bad_shape(self):
        with pytest.raises(ImageError):
            _img(np.zeros((2, 2)))

    def test_radiance_rejects_negative(self):
        with pytest.raises(ImageError):
            RadianceMap(-np.ones((8, 8, 3)))


class TestMetrics:
    def test_psnr_identical_is_capped(self):
        a = _img(np.full((4, 4, 3), 0.3))
        assert psnr(a, a) == imaging.PSNR_CAP

    def test_psnr_known_value(self):
        # Uniform error 0.1 -> mse 0.01 -> 20 dB.
        a = np.full((4, 4, 3), 0.3)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_psnr_dimension_mismatch(self):
        with pytest.raises(ImageError):
            psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))

    def test_charbonnier_identical(self):
        a = np.zeros((2, 3, 3))
        # 18 elements, each sqrt(eps^2) = eps.
        assert charbonnier(a, a, eps=1e-3) == pytest.approx(18e-3)

    def test_charbonnier_single_element(self):
        a = np.zeros((1, 1, 3))
        b = a.copy()
        b[0, 0, 0] = 1e-3
        # sqrt(1e-6 + 1e-6) + 2 * 1e-3
        assert charbonnier(a, b) == pytest.approx(np.sqrt(2e-6) + 2e-3, rel=1e-12)

    def test_charbonnier_rejects_eps(self):
        with pytest.raises(ValueError):
            charbonnier(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), eps=0)


class TestDownsample:
    def test_block_mean(self):
        a = np.arange(16, dtype=np.float64).reshape(4, 4, 1).repeat(3, axis=2) / 16
        out = downsample(_img(a), 2, 2)
        np.testing.assert_allclose(out.pixels[..., 0], np.array([[2.5, 4.5], [10.5, 12.5]]) / 16, atol=1e-6)

    def test_non_integer_factor_preserves_mean(self):
        rng = np.random.default_rng(0)
        a = rng.random((9, 7, 3))
        out = downsample(_img(a), 4, 3)
        np.testing.assert_allclose(out.pixels.mean(axis=(0, 1)), a.mean(axis=(0, 1)), atol=1e-6)

    def test_constant_stays_constant(self):
        out = downsample(_img(np.full((10, 6, 3), 0.4)), 3, 5)
        np.testing.assert_allclose(out.pixels, 0.4, atol=1e-6)

    def test_upsample_rejected(self):
        with pytest.raises(ImageError):
            downsample(_img(np.zeros((4, 4, 3))), 8, 8)


class TestCatalog:
    def test_full_catalog(self):
        cat = build_catalog(10, 3)
        assert len(cat) == 120
        assert cat[0].indices == (0, 1, 2)
        assert cat[-1].indices == (7, 8, 9)
        assert list(cat.entries) == sorted(cat.entries)

    def test_span_pruned_count(self):
        # Brute-force count of 3-subsets of 0..9 with min <= 2 and max >= 4.
        cat = build_catalog(10, 3, span_predicate(2, 4))
        assert len(cat) == 81

    @given(st.integers(1, 8).flatmap(lambda j: st.tuples(st.just(j), st.integers(1, j))))
    def test_size_is_binomial(self, jk):
        from math import comb

        j, k = jk
        assert len(build_catalog(j, k)) == comb(j, k)

    def test_json_round_trip(self):
        cat = build_catalog(6, 2)
        again = BracketingCatalog.from_json(cat.to_json(), 6)
        assert again == cat
        assert again.index((1, 4)) == cat.index((1, 4))

    def test_rejects_empty_prune(self):
        with pytest.raises(ValueError):
            build_catalog(5, 2, lambda idx: False)

    def test_bracketing_must_increase(self):
        with pytest.raises(ValueError):
            Bracketing((2, 1, 3))


class TestPersistence:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        a = np.round(rng.random((5, 7, 3)) * 255) / 255
        imaging.save_png(_img(a), tmp_path / "a.png")
        np.testing.assert_allclose(imaging.load_png(tmp_path / "a.png").pixels, a, atol=1e-7)

    def test_radiance_round_trip(self, tmp_path):
        r = RadianceMap(np.random.default_rng(2).random((8, 9, 3)) * 100)
        imaging.save_radiance(r, tmp_path / "r.bin")
        np.testing.assert_array_equal(imaging.load_radiance(tmp_path / "r.bin").pixels, r.pixels)

    def test_radiance_truncated(self, tmp_path):
        r = RadianceMap(np.ones((8, 9, 3)))
        imaging.save_radiance(r, tmp_path / "r.bin")
        raw = (tmp_path / "r.bin").read_bytes()
        (tmp_path / "r.bin").write_bytes(raw[:-4])
        with pytest.raises(ImageError):
            imaging.load_radiance(tmp_path / "r.bin")
