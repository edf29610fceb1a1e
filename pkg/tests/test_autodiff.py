import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from point_importance import autodiff as ad
from point_importance.autodiff import SGD, SgdState, Tensor, sgd_step
from point_importance.exceptions import ConfigError, DimensionError, NonFiniteError, UsageError


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


class TestMatvec:
    def test_identity(self):
        np.testing.assert_array_equal(ad.matvec(np.eye(2), [3.0, -1.0]).data, [3.0, -1.0])

    def test_zero_matrix(self):
        np.testing.assert_array_equal(ad.matvec(np.zeros((3, 2)), [5.0, 7.0]).data, np.zeros(3))

    def test_hand_product(self):
        np.testing.assert_array_equal(ad.matvec([[1.0, 2.0], [0.0, 1.0]], [1.0, 1.0]).data, [3.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matvec(np.eye(2), [1.0, 2.0, 3.0])

    def test_gradient_both_arguments(self):
        rng = np.random.default_rng(0)
        W0, x0, c = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)
        W, x = Tensor(W0, requires_grad=True), Tensor(x0, requires_grad=True)
        ad.backward(ad.dot(ad.matvec(W, x), c))
        np.testing.assert_allclose(W.grad, numeric_grad(lambda w: (w @ x0) @ c, W0.copy()), rtol=1e-7)
        np.testing.assert_allclose(x.grad, numeric_grad(lambda v: (W0 @ v) @ c, x0.copy()), rtol=1e-7)


class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        np.testing.assert_array_equal(ad.relu([-3.0, -0.5]).data, [0.0, 0.0])

    def test_passthrough(self):
        np.testing.assert_array_equal(ad.relu([0.5]).data, [0.5])

    def test_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        ad.backward(ad.total(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])


class TestSoftmaxRows:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])

    def test_two_entry_row(self):
        np.testing.assert_allclose(ad.softmax_rows([[0.0, 1.0]]).data, [[0.26894, 0.73106]], atol=1e-5)

    @pytest.mark.parametrize("c", [-700.0, 0.0, 3.5, 900.0])
    def test_constant_row(self, c):
        np.testing.assert_allclose(ad.softmax_rows([[c, c, c]]).data, [[1 / 3] * 3], atol=1e-15)

    def test_mask_excludes_entries(self):
        P = ad.softmax_rows([[5.0, 0.0], [0.0, 5.0]], mask=~np.eye(2, dtype=bool)).data
        np.testing.assert_array_equal(P, [[0.0, 1.0], [1.0, 0.0]])

    def test_fully_masked_row_is_zero(self):
        P = ad.softmax_rows([[1.0]], mask=np.zeros((1, 1), dtype=bool)).data
        np.testing.assert_array_equal(P, [[0.0]])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, M):
        P = ad.softmax_rows(M).data
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.isfinite(P))

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, (4, 4), elements=st.floats(-100, 100)),
        arrays(np.float64, (4, 1), elements=st.floats(-500, 500)),
    )
    def test_row_shift_invariance(self, M, shift):
        np.testing.assert_allclose(ad.softmax_rows(M + shift).data, ad.softmax_rows(M).data, atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        M0, C = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        M = Tensor(M0, requires_grad=True)
        ad.backward(ad.total(ad.mul(ad.softmax_rows(M), C)))

        def f(m):
            e = np.exp(m - m.max(axis=1, keepdims=True))
            return ((e / e.sum(axis=1, keepdims=True)) * C).sum()

        np.testing.assert_allclose(M.grad, numeric_grad(f, M0.copy()), rtol=1e-6, atol=1e-10)

    def test_softmax_cols_is_transpose(self):
        rng = np.random.default_rng(2)
        M = rng.normal(size=(4, 4))
        np.testing.assert_allclose(ad.softmax_cols(M).data, ad.softmax_rows(M.T).data.T, atol=1e-15)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.total(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_dot_self(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.dot(x, x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_dead_relu(self):
        w = Tensor([3.0], requires_grad=True)
        ad.backward(ad.total(ad.mul(ad.relu([-1.0]), w)))
        np.testing.assert_array_equal(w.grad, [0.0])

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            ad.backward(ad.scale(x, 2.0))

    def test_shared_subexpression_accumulates(self):
        x = Tensor([1.5], requires_grad=True)
        y = ad.mul(x, x)
        ad.backward(ad.total(ad.add(y, y)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_deep_graph_no_recursion_limit(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = ad.scale(y, 1.0)
        ad.backward(ad.total(y))
        assert x.grad[0] == 1.0

    @pytest.mark.parametrize(
        "build, shapes",
        [
            (lambda a, b: ad.outer_add(a, b), [(3,), (4,)]),
            (lambda a, b: ad.outer(a, b), [(3,), (4,)]),
            (lambda a, b: ad.scale_rows(a, b), [(3, 4), (3,)]),
            (lambda a, b: ad.add_row(a, b), [(3, 4), (4,)]),
            (lambda a, b: ad.matmul(a, b), [(3, 2), (2, 4)]),
            (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 1)]),
            (lambda a, b: ad.add_scalar(a, b), [(3, 2), ()]),
            (lambda a, b: ad.sub(ad.transpose(a), b), [(2, 3), (3, 2)]),
            (lambda a, b: ad.log_softmax_rows(ad.mul(a, b)), [(3, 2), (3, 2)]),
            (lambda a, b: ad.softmax_cols(ad.mul(a, b)), [(3, 3), (3, 3)]),
        ],
    )
    def test_ops_match_finite_differences(self, build, shapes):
        rng = np.random.default_rng(3)
        a0, b0 = (rng.normal(size=s) for s in shapes)
        out0 = build(Tensor(a0), Tensor(b0)).data
        C = rng.normal(size=out0.shape)
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        ad.backward(ad.total(ad.mul(build(a, b), C)))
        fa = numeric_grad(lambda v: (build(Tensor(v), Tensor(b0)).data * C).sum(), a0.copy())
        fb = numeric_grad(lambda v: (build(Tensor(a0), Tensor(v)).data * C).sum(), np.array(b0, copy=True))
        np.testing.assert_allclose(a.grad, fa, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(b.grad, fb, rtol=1e-6, atol=1e-9)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(4)
        z0 = rng.normal(size=(4, 2))
        labels = [0, 1, 1, 0]
        z = Tensor(z0, requires_grad=True)
        ad.backward(ad.cross_entropy(z, labels))

        def f(v):
            ls = v - np.log(np.exp(v).sum(axis=1, keepdims=True))
            return -ls[np.arange(4), labels].mean()

        np.testing.assert_allclose(z.grad, numeric_grad(f, z0.copy()), rtol=1e-6)


class TestFiniteness:
    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflowing_op_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.mul([1e200], [1e200])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 3), elements=st.floats(-1e3, 1e3)))
    def test_ops_finite_on_bounded_inputs(self, M):
        for out in (ad.softmax_rows(M), ad.softmax_cols(M), ad.log_softmax_rows(M), ad.relu(M), ad.matmul(M, M)):
            assert np.all(np.isfinite(out.data))


class TestSgd:
    def test_zero_gradient_keeps_params(self):
        (p,) = sgd_step([np.array([1.0, -2.0])], [np.zeros(2)], SgdState(lr=1.0, momentum=0.0))
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_one_step(self):
        (p,) = sgd_step([np.array([1.0])], [np.array([2.0])], SgdState(lr=0.1, momentum=0.0))
        np.testing.assert_allclose(p, [0.8])

    def test_momentum_accumulates(self):
        state = SgdState(lr=0.1, momentum=0.9)
        g = np.array([1.0])
        params = [np.array([0.0])]
        params = sgd_step(params, [g], state)
        params = sgd_step(params, [g], state)
        np.testing.assert_allclose(state.velocity[0], 1.9 * g)
        np.testing.assert_allclose(params[0], -0.1 * (1.0 + 1.9))

    @pytest.mark.parametrize("lr", [0.0, -0.1])
    def test_rejects_non_positive_lr(self, lr):
        with pytest.raises(ConfigError):
            SgdState(lr=lr)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sgd_step([np.zeros(2)], [np.zeros(3)], SgdState(lr=0.1))

    def test_optimizer_minimises_quadratic(self):
        x = Tensor([3.0, -4.0], requires_grad=True)
        opt = SGD([x], lr=0.1, momentum=0.5)
        for _ in range(200):
            opt.zero_grad()
            ad.backward(ad.dot(x, x))
            opt.step()
        np.testing.assert_allclose(x.data, 0.0, atol=1e-8)

    def test_zero_lr_freezes(self):
        x = Tensor([3.0], requires_grad=True)
        opt = SGD([x], lr=0.0)
        ad.backward(ad.dot(x, x))
        opt.step()
        assert x.data[0] == 3.0
