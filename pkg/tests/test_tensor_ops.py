import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf

from oracles import avgpool_loops, conv3d_loops, matmul_loops
from volnet import ops
from volnet.gradcheck import finite_diff_grad, relative_error
from volnet.ops import BatchNormState, GeometryError
from volnet.tensor import ShapeError, Tape, Tensor


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(ops.add(T([1, 2]), T([3, 4])).data, [4, 6])

    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(T([-1, 0, 2])).data, [0, 0, 2])

    def test_relu_propagates_nan(self):
        assert np.isnan(ops.relu(T([np.nan, 1.0])).data[0])

    def test_mul_broadcast_matches_loops(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=3)
        out = ops.mul(T(a), T(b)).data
        assert out.shape == (2, 3)
        for i in range(2):
            for j in range(3):
                assert out[i, j] == pytest.approx(a[i, j] * b[j], abs=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
            ops.add(T(np.zeros((2, 3))), T(np.zeros(2)))

    def test_leading_dims_do_not_broadcast(self):
        # trailing-dim alignment only; a length-1 leading axis still stretches
        out = ops.add(T(np.zeros((1, 3))), T(np.ones((4, 3))))
        assert out.shape == (4, 3)

    def test_elementwise_dispatch(self):
        np.testing.assert_array_equal(ops.elementwise("relu", T([-2, 3])).data, [0, 3])
        np.testing.assert_array_equal(ops.elementwise("mul", T([2]), T([3])).data, [6])
        with pytest.raises(ValueError):
            ops.elementwise("pow", T([1]), T([1]))


class TestMatmul:
    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(ops.matmul(T(np.eye(3)), T(a)).data, a)

    def test_hand_values(self):
        np.testing.assert_array_equal(ops.matmul(T([[1, 2], [3, 4]]), T([[1], [1]])).data, [[3], [7]])

    def test_triple_loop(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 7)).astype(np.float32)
        b = rng.normal(size=(7, 3)).astype(np.float32)
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-5)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(T(np.zeros((2, 3))), T(np.zeros((4, 2))))


class TestConv3d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 3, 4, 5))
        y = ops.conv3d(T(x), T(np.ones((1, 1, 1, 1, 1))), T([0.0]))
        np.testing.assert_array_equal(y.data, x)

    def test_zero_input_gives_bias(self):
        y = ops.conv3d(T(np.zeros((1, 2, 4, 4, 4))), T(np.ones((3, 2, 3, 3, 3))), T([1.0, -2.0, 0.5]), padding=1)
        for k, v in enumerate([1.0, -2.0, 0.5]):
            assert np.all(y.data[0, k] == v)

    def test_reference_geometry(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 4, 6, 6)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        y = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=(1, 2, 2), padding=(1, 1, 1))
        ref = conv3d_loops(x, w, b, (1, 2, 2), (1, 1, 1))
        assert y.shape == ref.shape == (1, 3, 4, 3, 3)
        np.testing.assert_allclose(y.data, ref, atol=1e-4)

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(1, 2), c=st.integers(1, 3), k=st.integers(1, 3),
        dims=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
        kern=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
        stride=st.tuples(st.integers(1, 2), st.integers(1, 2), st.integers(1, 2)),
        pad=st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)),
        seed=st.integers(0, 2**16),
    )
    def test_property_matches_loops(self, n, c, k, dims, kern, stride, pad, seed):
        if any(d + 2 * p < kk for d, p, kk in zip(dims, pad, kern)):
            with pytest.raises(GeometryError):
                ops.conv3d(T(np.zeros((n, c, *dims))), T(np.zeros((k, c, *kern))), stride=stride, padding=pad)
            return
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, size=(n, c, *dims)).astype(np.float32)
        w = rng.uniform(-1, 1, size=(k, c, *kern)).astype(np.float32)
        b = rng.uniform(-1, 1, size=k).astype(np.float32)
        y = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, conv3d_loops(x, w, b, stride, pad), atol=1e-4)

    def test_output_shape_formula(self):
        assert ops.conv3d_output_shape((50, 112, 112), (3, 7, 7), (1, 2, 2), (1, 3, 3)) == (50, 56, 56)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv3d(T(np.zeros((1, 2, 3, 3, 3))), T(np.zeros((1, 3, 1, 1, 1))))

    def test_chunked_path_matches_single_chunk(self, monkeypatch):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 2, 5, 6, 6))
        w = rng.normal(size=(4, 2, 3, 3, 3))
        w_out = rng.normal(size=(3, 4, 3, 6, 6))
        runs = []
        for budget in (1 << 40, 1):  # one chunk, then one chunk per output slice
            monkeypatch.setattr(ops, "IM2COL_BUDGET_BYTES", budget)
            with Tape() as tape:
                a, b = T(x, True), T(w, True)
                y = ops.conv3d(a, b, padding=1, stride=(2, 1, 1))
                loss = ops.sum_(ops.mul(y, T(w_out)))
            g = tape.backward(loss)
            runs.append((y.data, g.grad_of(a).data, g.grad_of(b).data))
        for single, chunked in zip(*runs):
            np.testing.assert_allclose(chunked, single, atol=1e-10)


class TestPool:
    def test_constant(self):
        assert ops.avgpool3d_global(T(np.full((1, 1, 2, 3, 4), 7.5))).data[0, 0] == 7.5

    def test_hand_value(self):
        assert ops.avgpool3d_global(T(np.array([1, 2, 3, 4.0]).reshape(1, 1, 1, 2, 2))).data[0, 0] == 2.5

    def test_loop_oracle(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 3, 4, 5)).astype(np.float32)
        np.testing.assert_allclose(ops.avgpool3d_global(Tensor(x)).data, avgpool_loops(x), atol=1e-6)


class TestBatchNorm:
    def _x(self, seed=0):
        return np.random.default_rng(seed).normal(3.0, 2.0, size=(2, 3, 3, 4, 4))

    def test_train_normalizes(self):
        y = ops.batchnorm3d(T(self._x()), T(np.ones(3)), T(np.zeros(3)), BatchNormState(3), train=True).data
        assert np.all(np.abs(y.mean(axis=(0, 2, 3, 4))) < 1e-4)
        assert np.all(np.abs(y.var(axis=(0, 2, 3, 4)) - 1) < 1e-3)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([0.5, -1.0, 2.0])
        y = ops.batchnorm3d(T(self._x()), T(np.zeros(3)), T(beta), BatchNormState(3), train=True).data
        for c in range(3):
            assert np.all(y[:, c] == beta[c])

    def test_eval_scalar_oracle(self):
        x = self._x(1)
        st_ = BatchNormState(3, dtype=np.float64)
        st_.running_mean[:] = [0.5, -1.0, 2.0]
        st_.running_var[:] = [1.5, 0.25, 4.0]
        gamma, beta = np.array([1.0, 2.0, -0.5]), np.array([0.1, 0.0, 0.3])
        y = ops.batchnorm3d(T(x), T(gamma), T(beta), st_, train=False, eps=1e-5).data
        for idx in np.ndindex(x.shape):
            c = idx[1]
            ref = (x[idx] - st_.running_mean[c]) / np.sqrt(st_.running_var[c] + 1e-5) * gamma[c] + beta[c]
            assert y[idx] == pytest.approx(ref, abs=1e-10)

    def test_running_stats_update(self):
        x = self._x(2)
        st_ = BatchNormState(3, dtype=np.float64)
        ops.batchnorm3d(T(x), T(np.ones(3)), T(np.zeros(3)), st_, train=True, momentum=0.1)
        mu = x.mean(axis=(0, 2, 3, 4))
        var_unbiased = x.var(axis=(0, 2, 3, 4), ddof=1)
        np.testing.assert_allclose(st_.running_mean, 0.1 * mu, rtol=1e-12)
        np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * var_unbiased, rtol=1e-12)

    def test_eval_has_no_side_effects(self):
        st_ = BatchNormState(3)
        ops.batchnorm3d(T(self._x()), T(np.ones(3)), T(np.zeros(3)), st_, train=False)
        assert np.all(st_.running_mean == 0) and np.all(st_.running_var == 1)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            ops.batchnorm3d(T(self._x()), T(np.ones(3)), T(np.zeros(3)), BatchNormState(3), True, eps=0)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax(T([0, 0, 0, 0])).data, [0.25] * 4)

    def test_large_input(self):
        y = ops.softmax(T([1000.0, 0.0])).data
        assert np.all(np.isfinite(y)) and y[0] == 1.0 and y[1] < 1e-300

    def test_mpmath_oracle(self):
        x = np.random.default_rng(6).uniform(-5, 5, size=12)
        y = ops.softmax(T(x)).data
        mp.dps = 40
        ex = [mp.exp(mpf(float(v))) for v in x]
        z = sum(ex)
        assert abs(y.sum() - 1) < 1e-6
        for yi, ei in zip(y, ex):
            assert abs(yi - float(ei / z)) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-100, 100))
    def test_shift_invariance(self, xs, c):
        x = np.array(xs)
        a, b = ops.softmax(T(x)).data, ops.softmax(T(x + c)).data
        assert abs(a.sum() - 1) < 1e-6
        np.testing.assert_allclose(a, b, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=8))
    def test_finite_on_wide_range(self, xs):
        y = ops.softmax(Tensor(np.array(xs, dtype=np.float32))).data
        assert np.all(np.isfinite(y))


class TestBackward:
    def test_square(self):
        with Tape() as tape:
            x = T([3.0], True)
            loss = ops.sum_(ops.mul(x, x))
        assert tape.backward(loss).grad_of(x).data[0] == 6.0

    def test_relu_subgradient(self):
        with Tape() as tape:
            x = T([-1.0, 2.0, 0.0], True)
            loss = ops.sum_(ops.relu(x))
        np.testing.assert_array_equal(tape.backward(loss).grad_of(x).data, [0, 1, 0])

    def test_non_scalar_loss(self):
        with Tape() as tape:
            x = T([1.0, 2.0], True)
            y = ops.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_accumulation_on_reuse(self):
        x0 = np.random.default_rng(7).normal(size=(3, 4))
        with Tape() as tape:
            x = T(x0, True)
            loss = ops.sum_(ops.mul(x, x))
        np.testing.assert_allclose(tape.backward(loss).grad_of(x).data, 2 * x0)

    def test_untracked_inputs_record_nothing(self):
        with Tape() as tape:
            ops.add(T([1.0]), T([2.0]))
        assert tape.nodes == []

    def test_composite_graph_vs_finite_differences(self):
        rng = np.random.default_rng(8)
        x0 = rng.uniform(-1, 1, size=(2, 2, 3, 4, 4))
        w = rng.uniform(-1, 1, size=(3, 2, 3, 3, 3))
        fcw = rng.uniform(-1, 1, size=(3, 1))
        y = np.array([1.0, 0.0])
        from volnet.optim import bce_with_logits

        def f(xt):
            h = ops.conv3d(xt, T(w), padding=1)
            h = ops.batchnorm3d(h, T(np.ones(3)), T(np.zeros(3)), BatchNormState(3, np.float64), train=True)
            h = ops.avgpool3d_global(ops.relu(h))
            return bce_with_logits(ops.reshape(ops.matmul(h, T(fcw)), (2,)), T(y))

        with Tape() as tape:
            xt = T(x0, True)
            loss = f(xt)
        analytic = tape.backward(loss).grad_of(xt).data
        numeric = finite_diff_grad(f, T(x0), h=1e-5).data
        assert relative_error(analytic, numeric) < 1e-3


class TestPlumbing:
    def test_reshape_round_trip(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(ops.reshape(ops.reshape(T(x), (3, 2)), (2, 3)).data, x)

    def test_token_layout(self):
        n, c, d, h, w = 2, 3, 2, 3, 4
        x = np.random.default_rng(9).normal(size=(n, c, d, h, w))
        tok = ops.permute(ops.reshape(T(x), (n, c, d * h * w)), (0, 2, 1)).data
        for zi in range(d):
            for yi in range(h):
                for xi in range(w):
                    np.testing.assert_array_equal(tok[1, zi * h * w + yi * w + xi], x[1, :, zi, yi, xi])

    def test_permute_gradient(self):
        x0 = np.random.default_rng(10).normal(size=(2, 3, 4))
        wout = np.random.default_rng(11).normal(size=(4, 2, 3))
        f = lambda t: ops.sum_(ops.mul(ops.permute(t, (2, 0, 1)), T(wout)))  # noqa: E731
        with Tape() as tape:
            xt = T(x0, True)
            loss = f(xt)
        np.testing.assert_allclose(tape.backward(loss).grad_of(xt).data, finite_diff_grad(f, T(x0)).data, atol=1e-8)

    def test_concat_and_slice(self):
        a, b = T(np.ones((2, 2)), True), T(np.zeros((1, 2)), True)
        with Tape() as tape:
            c = ops.concat([a, b], axis=0)
            loss = ops.sum_(ops.slice_(c, (slice(1, 3),)))
        g = tape.backward(loss)
        np.testing.assert_array_equal(g.grad_of(a).data, [[0, 0], [1, 1]])
        np.testing.assert_array_equal(g.grad_of(b).data, [[1, 1]])

    def test_errors(self):
        with pytest.raises(ShapeError):
            ops.reshape(T(np.zeros(6)), (4, 2))
        with pytest.raises(ShapeError):
            ops.permute(T(np.zeros((2, 3))), (0, 0))
        with pytest.raises(ShapeError):
            ops.concat([T(np.zeros((2, 2))), T(np.zeros((2, 3)))], axis=0)


class TestFiniteDiff:
    def test_linear(self):
        np.testing.assert_allclose(finite_diff_grad(lambda t: ops.sum_(t), T([1.0, -2.0, 5.0])).data, 1.0)

    def test_square(self):
        g = finite_diff_grad(lambda t: ops.sum_(ops.mul(t, t)), T([1.0, 2.0])).data
        np.testing.assert_allclose(g, [2, 4], atol=1e-6)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: ops.sum_(t), T([1.0]), h=0)


def test_float32_default_and_float64_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
