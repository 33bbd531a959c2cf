import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusionrep import tensor as T
from fusionrep.tensor import Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_matmul_broadcasts_batch(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)

    def test_shape_mismatch_names_op(self):
        with pytest.raises(T.ShapeError) as e:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert "matmul" in str(e.value)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 7)) * 50)
        np.testing.assert_allclose(T.softmax(x).data.sum(-1), 1.0, atol=1e-12)

    def test_softmax_mask_zeroes_masked_keys(self):
        x = Tensor(np.zeros((1, 4)))
        mask = np.array([[True, False, True, False]])
        np.testing.assert_allclose(T.softmax(x, mask=mask).data, [[0.5, 0, 0.5, 0]])

    def test_log1p_exp_is_stable(self):
        x = Tensor(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(T.log1p_exp(x).data, [0.0, np.log(2.0), 800.0])

    def test_layer_norm_statistics(self):
        y = T.layer_norm(Tensor(np.random.default_rng(2).normal(3, 5, size=(4, 16)))).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-6)

    def test_l2_normalize_rejects_zero_vector(self):
        with pytest.raises(T.DegenerateVectorError):
            T.l2_normalize(Tensor(np.zeros((1, 3))))

    def test_non_finite_is_reported(self):
        with pytest.raises(T.NonFiniteError):
            T.exp(Tensor(np.array([1e4])))

    def test_funnel_pool_odd_length_keeps_tail(self):
        x = Tensor(np.arange(5.0).reshape(1, 5, 1))
        np.testing.assert_allclose(T.funnel_pool(x, 2).data.ravel(), [0.5, 2.5, 4.0])


class TestGradients:
    """Analytic gradients against central differences, op by op."""

    @pytest.mark.parametrize(
        "fn,shapes",
        [
            (lambda a, b: T.sum(T.mul(a, b)), [(3, 4), (3, 4)]),
            (lambda a, b: T.sum(T.add(a, b) * T.add(a, b)), [(3, 4), (4,)]),
            (lambda a, b: T.sum(T.matmul(a, b) * T.matmul(a, b)), [(2, 3, 4), (4, 2)]),
            (lambda a: T.sum(T.gelu(a) * a), [(5, 3)]),
            (lambda a: T.sum(T.softmax(a) * T.softmax(a)), [(3, 6)]),
            (lambda a: T.sum(T.layer_norm(a) * T.exp(T.scale(a, 0.1))), [(3, 6)]),
            (lambda a: T.sum(T.l2_normalize(a) * T.l2_normalize(a)[:, ::-1]), [(4, 5)]),
            (lambda a: T.mean(T.log1p_exp(a)), [(4, 5)]),
            (lambda a: T.sum(T.funnel_pool(a, 2) * T.funnel_pool(a, 2)), [(2, 5, 3)]),
            (lambda a, b: T.sum(T.concat([a, b], axis=1) * T.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
            (lambda a: T.sum(T.reshape(T.transpose(a), (3, 4)) * T.reshape(a, (3, 4))), [(2, 6)]),
        ],
    )
    def test_op_gradients(self, fn, shapes):
        rng = np.random.default_rng(0)
        leaves = [leaf(rng, *s) for s in shapes]
        assert T.grad_check(lambda: fn(*leaves), leaves, h=1e-6) < 1e-6

    def test_masked_softmax_gradient(self):
        rng = np.random.default_rng(4)
        a = leaf(rng, 2, 5)
        mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0]], dtype=bool)
        w = rng.normal(size=(2, 5))
        assert T.grad_check(lambda: T.sum(T.softmax(a, mask=mask) * Tensor(w)), [a], h=1e-6) < 1e-6

    def test_shared_subexpression_accumulates(self):
        a = Tensor(np.array(3.0), requires_grad=True)
        T.backward(a * a + a)
        assert a.grad == pytest.approx(7.0)

    def test_backward_twice_on_fresh_graph_is_identical(self):
        rng = np.random.default_rng(5)
        a = leaf(rng, 4, 4)
        grads = []
        for _ in range(2):
            a.grad = None
            T.backward(T.sum(T.gelu(a @ a)))
            grads.append(a.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 4), d=st.integers(2, 6), seed=st.integers(0, 2**16))
    def test_normalized_dot_gradient(self, n, d, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng, n, d), leaf(rng, n, d)
        f = lambda: T.sum(T.l2_normalize(a) * T.l2_normalize(b))  # noqa: E731
        assert T.grad_check(f, [a, b], h=1e-6) < 1e-5
