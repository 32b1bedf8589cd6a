import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from semray import autodiff as ad
from semray.autodiff import Param, Tape, Tensor, backward
from semray.errors import ShapeError
from semray.optim import adam_step, exponential_lr, grad_check

rng = np.random.default_rng(1234)


def finite_floats(shape, lo=-3.0, hi=3.0):
    return hnp.arrays(np.float64, shape, elements=st.floats(lo, hi, width=64))


class TestMatmul:
    def test_identity(self):
        a = Tensor(rng.normal(size=(3, 4)))
        out = ad.matmul(Tensor(np.eye(3)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_adjoints_match_finite_differences(self):
        a = Param("a", rng.normal(size=(5, 7)))
        b = Param("b", rng.normal(size=(7, 3)))
        probe = rng.normal(size=(5, 3))
        rep = grad_check(lambda: ad.sum_(ad.matmul(a, b) * probe), [a, b])
        assert rep.passed and rep.max_rel_err < 1e-6

    def test_batched_broadcast_adjoints(self):
        a = Param("a", rng.normal(size=(2, 3, 4, 5)))
        b = Param("b", rng.normal(size=(5, 4)))
        probe = rng.normal(size=(2, 3, 4, 4))
        rep = grad_check(lambda: ad.sum_(ad.matmul(a, b) * probe), [a, b])
        assert rep.passed


class TestSoftmax:
    def test_uniform_on_constant(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-15)

    def test_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_gradient(self):
        x = Param("x", rng.normal(size=(4,)))
        probe = rng.normal(size=(4,))
        rep = grad_check(lambda: ad.sum_(ad.softmax(x, axis=0) * probe), [x])
        assert rep.passed

    @given(finite_floats((3, 5)))
    def test_rows_sum_to_one(self, x):
        out = ad.softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestElementwise:
    def test_variance_of_constant_is_zero(self):
        out = ad.variance(Tensor(np.full((6,), 2.5)), axis=0)
        assert out.item() == 0.0

    def test_conv2d_ones_1x1_identity(self):
        x = Tensor(rng.normal(size=(1, 5, 5, 1)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, w, stride=1, padding=0)
        np.testing.assert_allclose(out.data, x.data)

    def test_bilinear_at_grid_point_exact(self):
        fmap = Tensor(rng.normal(size=(4, 5, 3)))
        out = ad.bilinear_sample(fmap, Tensor([[2.0, 3.0]]))
        np.testing.assert_allclose(out.data[0], fmap.data[3, 2])

    def test_bilinear_interior_interpolation(self):
        fmap = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4, 1))
        out = ad.bilinear_sample(fmap, Tensor([[0.5, 0.5]]))
        np.testing.assert_allclose(out.data[0, 0], np.mean([0, 1, 4, 5]))

    def test_upsample_then_sum_adjoint(self):
        x = Param("x", rng.normal(size=(1, 3, 3, 2)))
        probe = rng.normal(size=(1, 6, 6, 2))
        rep = grad_check(lambda: ad.sum_(ad.upsample2x(x) * probe), [x])
        assert rep.passed

    @given(finite_floats((4, 6)))
    def test_cumsum_matches_numpy(self, x):
        np.testing.assert_allclose(ad.cumsum(Tensor(x), 1).data, np.cumsum(x, 1))

    def test_elementwise_gradients(self):
        x = Param("x", rng.normal(size=(8,)) * 1.5)

        def f():
            y = ad.elu(x) + ad.relu(x) * ad.sigmoid(x)
            y = y + ad.exp(0.3 * x) + ad.clamp_min(x, 0.25)
            return ad.sum_(ad.log(ad.clamp_min(y + 10.0, 1e-12)))

        assert grad_check(f, [x]).passed

    def test_concat_stack_slice_gradients(self):
        a = Param("a", rng.normal(size=(3, 4)))
        b = Param("b", rng.normal(size=(2, 4)))

        def f():
            y = ad.concat([a, b], axis=0)                 # (5, 4)
            z = ad.stack([y, y * 2.0], axis=1)            # (5, 2, 4)
            return ad.sum_(z[1:4, 0] * z[1:4, 1]) + ad.sum_(ad.transpose(y, (1, 0))[2])

        assert grad_check(f, [a, b]).passed


class TestBackward:
    def test_sum_of_squares(self):
        p = Param("p", np.array([1.0, 2.0, 3.0]))
        with Tape() as t:
            backward(ad.sum_(p * p), t)
        np.testing.assert_allclose(p.grad, [2.0, 4.0, 6.0])

    def test_unreachable_param_untouched(self):
        p = Param("p", np.array([1.0, 2.0]))
        q = Param("q", np.array([5.0]))
        with Tape() as t:
            backward(ad.sum_(p * 3.0), t)
        np.testing.assert_array_equal(q.grad, [0.0])
        np.testing.assert_allclose(p.grad, [3.0, 3.0])

    def test_grad_accumulates_across_backward_calls(self):
        p = Param("p", np.array([2.0]))
        for _ in range(2):
            with Tape() as t:
                backward(ad.sum_(p * p), t)
        np.testing.assert_allclose(p.grad, [8.0])

    def test_non_scalar_loss_rejected(self):
        p = Param("p", np.array([1.0, 2.0]))
        with Tape() as t:
            y = p * 2.0
            with pytest.raises(ShapeError):
                backward(y, t)

    def test_reused_subgraph_accumulates(self):
        p = Param("p", np.array([3.0]))
        with Tape() as t:
            y = p * 2.0
            backward(ad.sum_(y * y + y), t)   # d/dp (4p^2 + 2p) = 8p + 2
        np.testing.assert_allclose(p.grad, [26.0])

    def test_forward_deterministic(self):
        x = Tensor(rng.normal(size=(16, 16)))
        a = ad.softmax(ad.exp(x * 0.5), axis=1).data
        b = ad.softmax(ad.exp(x * 0.5), axis=1).data
        assert np.array_equal(a, b)


class TestAdam:
    def test_zero_grad_is_noop(self):
        p = Param("p", np.array([1.0, -2.0]))
        adam_step([p], lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_quadratic_descent_monotone(self):
        p = Param("p", np.array([2.0]))
        vals = [float(p.data[0])]
        for _ in range(50):
            with Tape() as t:
                backward(ad.sum_(p * p), t)
            adam_step([p], lr=0.05)
            vals.append(float(p.data[0]))
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_grads_zeroed_after_step(self):
        p = Param("p", np.array([1.0]))
        p.grad[...] = 3.0
        adam_step([p], lr=0.01)
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_lr_schedule_endpoints(self):
        assert exponential_lr(0, 1000) == pytest.approx(1e-3)
        assert exponential_lr(1000, 1000) == pytest.approx(5e-5)
        assert exponential_lr(2000, 1000) == pytest.approx(5e-5)
        mid = exponential_lr(500, 1000)
        assert 5e-5 < mid < 1e-3


class TestGradCheckHarness:
    def test_quadratic_bowl_tight(self):
        p = Param("p", np.array([3.0, -1.5]))
        rep = grad_check(lambda: ad.sum_(p * p), [p], tol=1e-9)
        assert rep.passed and rep.max_rel_err < 1e-9

    def test_softmax_cross_entropy(self):
        p = Param("p", rng.normal(size=(5,)))
        target = np.zeros(5)
        target[2] = 1.0

        def f():
            probs = ad.softmax(p, axis=0)
            return -ad.sum_(Tensor(target) * ad.log(ad.clamp_min(probs, 1e-12)))

        rep = grad_check(f, [p], tol=1e-6)
        assert rep.passed

    def test_nondeterminism_detected(self):
        from semray.errors import GradCheckError
        p = Param("p", np.array([1.0]))
        state = {"n": 0}

        def f():
            state["n"] += 1
            return ad.sum_(p * float(state["n"]))

        with pytest.raises(GradCheckError):
            grad_check(f, [p])
