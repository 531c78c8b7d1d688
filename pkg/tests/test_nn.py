import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gradsweep
from ebsel.nn import CheckpointError, GraphError, ParamStore, Tensor, adam_step, load_checkpoint, ops, save_checkpoint
from ebsel.nn.checkpoint import dumps
from ebsel.nn.gradcheck import relative_error


class TestGradients:
    @pytest.mark.parametrize("name", sorted(gradsweep.op_cases()))
    def test_op(self, name):
        fn, xs = gradsweep.op_cases()[name]
        from ebsel.nn.gradcheck import check_inputs

        assert max(check_inputs(fn, xs, gradsweep.STEP)) < 1e-4

    @pytest.mark.parametrize("flags", [{}, {"use_semantic": False}, {"use_illumination": False}])
    def test_ebsnet(self, flags):
        errs = gradsweep.ebs_errors(0, **flags)
        assert max(errs.values()) < 1e-4, errs

    def test_mefnet(self):
        errs = gradsweep.mef_errors(0)
        assert max(errs.values()) < 1e-4, errs

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)


class TestConv:
    def test_matches_direct_loops(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        out = ops.conv2d(x, w, b, padding=(1, 0)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
        expect = np.zeros((2, 4, 5, 5))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(5):
                        expect[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 2] * w[o]) + b[o]
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


class TestLayers:
    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        ops.sum(ops.maxpool2d(x, 2)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    @given(st.integers(1, 6), st.integers(1, 6), st.floats(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_upsample_preserves_constants(self, h, w, c):
        out = ops.upsample_bilinear(np.full((1, 1, h, w), c), 2 * h + 1, 3 * w)
        np.testing.assert_allclose(out.data, c, atol=1e-5)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
    def test_softmax_is_distribution(self, row):
        p = ops.softmax(np.array([row])).data
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert (p >= 0).all()

    def test_constant_scalar_keeps_dtype(self):
        x = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        assert ops.add(x, -0.5).dtype == np.float32
        assert ops.mul(2.0, x).dtype == np.float32


class TestGraph:
    def test_double_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ops.sum(ops.square(x))
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            ops.square(x).backward()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_forward(self):
        with pytest.raises(GraphError):
            ops.scale(Tensor(np.array([1e308]), requires_grad=True), 1e10)

    def test_shared_subgraph_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        ops.sum(ops.add(ops.mul(x, x), x)).backward()
        np.testing.assert_allclose(x.grad, [7.0])


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # After one step the bias-corrected update is lr * g / (|g| + eps).
        store = ParamStore(np.float64)
        store.add("w", np.array([1.0, -2.0, 0.5]))
        store["w"].grad = np.array([0.3, -4.0, 1e-3])
        adam_step(store, lr=0.01)
        g = np.array([0.3, -4.0, 1e-3])
        np.testing.assert_allclose(store["w"].data, np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8),
                                   rtol=1e-12)
        assert store.step == 1

    def test_missing_gradient(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(RuntimeError):
            adam_step(store, 0.1)

    def test_minimizes_quadratic(self):
        store = ParamStore(np.float64)
        store.add("w", np.array([5.0, -3.0]))
        for _ in range(2000):
            store.zero_grad()
            ops.sum(ops.square(store["w"])).backward()
            adam_step(store, 0.05)
        np.testing.assert_allclose(store["w"].data, 0.0, atol=1e-2)


class TestCheckpoint:
    def _store(self):
        rng = np.random.default_rng(0)
        s = ParamStore()
        s.add("a.w", rng.standard_normal((3, 4)))
        s.add("a.b", rng.standard_normal(3))
        s.zero_grad()
        adam_step(s, 1e-3)
        return s

    def test_byte_exact_round_trip(self, tmp_path):
        s = self._store()
        save_checkpoint(tmp_path / "c.ckpt", s, {"stage": 1})
        t = ParamStore()
        t.add("a.w", np.zeros((3, 4)))
        t.add("a.b", np.zeros(3))
        meta = load_checkpoint(tmp_path / "c.ckpt", t)
        assert meta == {"stage": 1}
        assert dumps(t, meta) == (tmp_path / "c.ckpt").read_bytes()
        assert t.step == s.step

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", self._store())
        t = ParamStore()
        t.add("a.w", np.zeros((4, 3)))
        t.add("a.b", np.zeros(3))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ckpt", t)

    def test_name_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", self._store())
        t = ParamStore()
        t.add("a.w", np.zeros((3, 4)))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ckpt", t)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"garbage-bytes-here")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ckpt", ParamStore())
