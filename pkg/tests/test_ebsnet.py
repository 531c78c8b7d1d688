import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebsel import ebsnet
from ebsel.ebsnet import EbsConfig, EbsNet, PolicyDistribution, hist_pyramid, select
from ebsel.imaging import LdrImage
from ebsel.nn import ops
from historacle import count_histograms, random_preview

TINY = dict(preview_size=16, bins=8, conv_channels=(3, 4, 4), semantic_width=6, hist_channels=(3, 2),
            illumination_width=5, fused_width=5, n_actions=7)


class TestHistogram:
    def test_length(self):
        assert EbsConfig().hist_length == 672
        assert hist_pyramid(np.zeros((32, 32, 3))).values.size == 672

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_counting_oracle(self, seed):
        img = LdrImage(random_preview(np.random.default_rng(seed), 32))
        np.testing.assert_array_equal(hist_pyramid(img).values, count_histograms(img.pixels))

    def test_each_patch_normalized(self):
        hp = hist_pyramid(random_preview(np.random.default_rng(9), 16), bins=8)
        np.testing.assert_allclose(hp.patches().sum(axis=1), 1.0)
        assert hp.level(1).shape == (1, 8) and hp.level(3).shape == (16, 8)

    def test_white_goes_to_top_bin(self):
        hp = hist_pyramid(np.ones((8, 8, 3)), bins=4)
        np.testing.assert_array_equal(hp.patches()[:, 3], 1.0)

    def test_indivisible_size(self):
        with pytest.raises(ValueError):
            hist_pyramid(np.zeros((10, 8, 3)))


class TestSelect:
    def test_argmax_tie_takes_lowest(self):
        assert select(np.array([0.1, 0.4, 0.4, 0.1])) == 1

    def test_sample_frequencies(self):
        p = np.array([0.1, 0.6, 0.3])
        rng = np.random.default_rng(0)
        counts = np.bincount([select(p, "sample", rng) for _ in range(100_000)], minlength=3)
        # Binomial std at n=1e5 is at most 0.0016; allow 4 sigma.
        np.testing.assert_allclose(counts / 1e5, p, atol=0.0064)

    def test_sample_is_seeded(self):
        p = np.full(10, 0.1)
        assert [select(p, "sample", 5) for _ in range(3)] == [select(p, "sample", 5)] * 3

    def test_zero_probability_never_sampled(self):
        p = np.array([0.5, 0.0, 0.5])
        rng = np.random.default_rng(1)
        assert 1 not in {select(p, "sample", rng) for _ in range(2000)}

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            select(np.array([np.nan, 1.0]))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            select(np.array([1.0]), "greedy")

    def test_distribution_validation(self):
        with pytest.raises(ValueError):
            PolicyDistribution(np.array([0.5, 0.6]))


class TestNetwork:
    def _inputs(self, cfg, n=2, seed=0):
        rng = np.random.default_rng(seed)
        return rng.random((n, 3, cfg.preview_size, cfg.preview_size)), rng.random((n, cfg.hist_length))

    def test_policy_is_distribution(self):
        cfg = EbsConfig(**TINY)
        x, h = self._inputs(cfg)
        p = ops.softmax(ebsnet.forward_logits(x, h, ebsnet.init_params(cfg, 0), cfg)).data
        assert p.shape == (2, 7)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_default_widths(self):
        store = ebsnet.init_params(EbsConfig(), 0)
        assert store["sem.fc.w"].shape == (256, 64 * 16 * 16)
        assert store["hist.fc.w"].shape == (128, 16 * 32)
        assert store["policy.fc.w"].shape == (120, 128)

    def test_disabled_branch_ignores_its_input(self):
        cfg = EbsConfig(**TINY, use_semantic=False)
        store = ebsnet.init_params(cfg, 0)
        x, h = self._inputs(cfg)
        a = ebsnet.forward_logits(x, h, store, cfg).data
        b = ebsnet.forward_logits(np.zeros_like(x), h, store, cfg).data
        np.testing.assert_array_equal(a, b)
        assert "sem.fc.w" not in store

    def test_shared_layers_start_identical(self):
        full = ebsnet.init_params(EbsConfig(**TINY), 3)
        illum = ebsnet.init_params(EbsConfig(**TINY, use_semantic=False), 3)
        for name in illum:
            np.testing.assert_array_equal(full[name].data, illum[name].data)

    def test_no_branch_rejected(self):
        with pytest.raises(ValueError):
            EbsConfig(use_semantic=False, use_illumination=False)

    def test_wrong_preview_size(self):
        cfg = EbsConfig(**TINY)
        x, h = self._inputs(cfg)
        with pytest.raises(ValueError):
            ebsnet.forward_logits(x[:, :, :8, :8], h, ebsnet.init_params(cfg, 0), cfg)

    def test_batch_rows_independent(self):
        cfg = EbsConfig(**TINY)
        store = ebsnet.init_params(cfg, 0)
        x, h = self._inputs(cfg, 4)
        whole = ebsnet.forward_logits(x, h, store, cfg).data
        one = ebsnet.forward_logits(x[2:3], h[2:3], store, cfg).data
        np.testing.assert_allclose(whole[2:3], one, rtol=1e-5, atol=1e-6)

    def test_ebsnet_select_uses_previews(self):
        cfg = EbsConfig(**TINY)
        net = EbsNet(cfg, seed=1)
        rng = np.random.default_rng(0)
        previews = [LdrImage(random_preview(rng, 16)) for _ in range(3)]
        sel = net.select(previews)
        assert len(sel) == 3 and all(0 <= s < 7 for s in sel)
        assert sel == [int(np.argmax(p)) for p in net.probabilities(previews)]

    @given(st.integers(0, 2**31))
    @settings(max_examples=5, deadline=None)
    def test_init_is_seed_deterministic(self, seed):
        a = ebsnet.init_params(EbsConfig(**TINY), seed)
        b = ebsnet.init_params(EbsConfig(**TINY), seed)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
