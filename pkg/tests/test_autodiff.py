"""Tensor core: primitives, tape backward, determinism, broadcasting rules."""

import numpy as np
import pytest

from hypersphere_ad import autodiff as ad
from hypersphere_ad.autodiff import ContractError, DomainError, Rng, ShapeError, Tape
from hypersphere_ad.gradcheck import check_gradients, run_suites


def matmul_oracle(a, b):
    """Independent triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        t = Tape()
        a = t.leaf(np.eye(2))
        b = t.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_orthogonal_pick(self):
        t = Tape()
        a = t.leaf(np.array([[1.0, 0.0]]))
        b = t.leaf(np.array([[0.0], [5.0]]))
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[0.0]])

    def test_matches_loop_oracle(self):
        rng = Rng(7)
        a = rng.normal(size=(3, 4), dtype=np.float64)
        b = rng.normal(size=(4, 2), dtype=np.float64)
        t = Tape()
        got = ad.matmul(t.leaf(a), t.leaf(b)).data
        np.testing.assert_allclose(got, matmul_oracle(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            ad.matmul(t.leaf(np.zeros((2, 3))), t.leaf(np.zeros((2, 3))))


class TestElementwise:
    def test_sigmoid_at_zero(self):
        t = Tape()
        assert ad.sigmoid(t.leaf(np.zeros(3))).data[0] == 0.5

    def test_tanh_at_zero(self):
        t = Tape()
        assert ad.tanh(t.leaf(np.zeros(()))).data == 0.0

    def test_leaky_relu_negative(self):
        t = Tape()
        out = ad.leaky_relu(t.leaf(np.array([-2.0])), slope=0.01)
        np.testing.assert_allclose(out.data, [-0.02])

    def test_leaky_relu_derivative_at_zero_is_one(self):
        t = Tape()
        x = t.leaf(np.array([0.0]))
        t.backward(ad.reduce_sum(ad.leaky_relu(x, slope=0.01)))
        np.testing.assert_array_equal(t.grad(x), [1.0])

    def test_log_domain_error(self):
        t = Tape()
        with pytest.raises(DomainError):
            ad.log(t.leaf(np.array([1.0, -1.0])))

    def test_sigmoid_extreme_inputs_finite(self):
        t = Tape()
        out = ad.sigmoid(t.leaf(np.array([-1e4, 1e4])))
        assert np.all(np.isfinite(out.data))


class TestReduce:
    def test_sum(self):
        t = Tape()
        assert ad.reduce_sum(t.leaf(np.array([1.0, 2.0, 3.0]))).data == 6.0

    def test_mean_of_constant(self):
        t = Tape()
        assert ad.reduce_mean(t.leaf(np.full((2, 3, 4), 7.0))).data == 7.0

    def test_max_backward_first_index_tie_break(self):
        t = Tape()
        x = t.leaf(np.array([3.0, 3.0, 1.0]))
        t.backward(ad.reduce_max(x))
        np.testing.assert_array_equal(t.grad(x), [1.0, 0.0, 0.0])

    def test_empty_axis_is_domain_error(self):
        t = Tape()
        with pytest.raises(DomainError):
            ad.reduce_sum(t.leaf(np.zeros((3, 0))), axes=1)


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        t = Tape()
        x = t.leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
        t.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(t.grad(x), np.ones((2, 3, 4)))

    def test_grad_of_half_norm_sq_is_x(self):
        t = Tape()
        xv = np.random.default_rng(1).normal(size=(5,))
        x = t.leaf(xv)
        t.backward(ad.reduce_sum(ad.square(x)) * 0.5)
        np.testing.assert_allclose(t.grad(x), xv, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        t = Tape()
        x = t.leaf(np.zeros(3))
        with pytest.raises(ContractError):
            t.backward(x)

    def test_cross_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ContractError):
            ad.add(t1.leaf(np.zeros(2)), t2.leaf(np.zeros(2)))

    def test_unreached_leaf_gets_zero_grad(self):
        t = Tape()
        x = t.leaf(np.ones(3))
        y = t.leaf(np.ones(3))
        t.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(t.grad(y), np.zeros(3))

    def test_composed_graph_matches_finite_differences(self):
        def build(tape, leaves):
            a, b = leaves
            h = ad.tanh(ad.matmul(a, b))
            return ad.reduce_sum(ad.mul(h, h)) + ad.reduce_mean(ad.sigmoid(a))

        rng = Rng(3)
        err = check_gradients(
            build, [rng.normal(size=(3, 2), dtype=np.float64),
                    rng.normal(size=(2, 4), dtype=np.float64)]
        )
        assert err < 1e-4

    def test_backward_is_linear(self):
        # grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        xv = Rng(11).normal(size=(4,), dtype=np.float64)
        a_coef, b_coef = 2.5, -1.25

        def grads_of(fn):
            t = Tape()
            x = t.leaf(xv)
            t.backward(fn(x))
            return t.grad(x)

        l1 = lambda x: ad.reduce_sum(ad.square(x))
        l2 = lambda x: ad.reduce_sum(ad.sigmoid(x))
        combined = grads_of(lambda x: l1(x) * a_coef + l2(x) * b_coef)
        expected = a_coef * grads_of(l1) + b_coef * grads_of(l2)
        np.testing.assert_allclose(combined, expected, atol=1e-12)

    def test_shared_subexpression_accumulates(self):
        t = Tape()
        x = t.leaf(np.array([3.0]))
        y = ad.add(x, x)  # dy/dx = 2
        t.backward(ad.reduce_sum(y))
        np.testing.assert_array_equal(t.grad(x), [2.0])


class TestBroadcast:
    def test_leading_axis_allowed(self):
        t = Tape()
        a = t.leaf(np.ones((4, 3)))
        b = t.leaf(np.arange(3.0))
        out = ad.add(a, b)
        assert out.shape == (4, 3)
        t.backward(ad.reduce_sum(out))
        np.testing.assert_array_equal(t.grad(b), [4.0, 4.0, 4.0])

    def test_inner_broadcast_rejected(self):
        t = Tape()
        with pytest.raises(ShapeError):
            ad.add(t.leaf(np.ones((4, 1))), t.leaf(np.ones((4, 3))))

    def test_scalar_allowed(self):
        t = Tape()
        out = ad.mul(t.leaf(np.ones((2, 2))), 3.0)
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


class TestRng:
    def test_same_seed_bit_identical(self):
        a = Rng(123).normal(size=(100,), dtype=np.float32)
        b = Rng(123).normal(size=(100,), dtype=np.float32)
        assert a.tobytes() == b.tobytes()

    def test_children_are_independent_streams(self):
        r = Rng(5)
        a = r.child("init").normal(size=10)
        b = r.child("shuffle").normal(size=10)
        assert not np.array_equal(a, b)
        a2 = Rng(5).child("init").normal(size=10)
        assert np.array_equal(a, a2)

    def test_algorithm_is_named(self):
        assert Rng(0).algorithm == "pcg64"


def test_primitive_gradient_suites():
    # 20 random composed graphs per primitive, relative error < 1e-4
    results = run_suites(cases=20)
    worst = {k: v for k, v in results.items() if v >= 1e-4}
    assert not worst, f"gradient checks failed: {worst}"
