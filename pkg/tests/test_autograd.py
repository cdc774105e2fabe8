import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkn import autograd as ag
from dkn.autograd import Parameter, Tensor, backward, no_grad
from dkn.errors import ConfigurationError, ContractError, DimensionError
from dkn.gradcheck import finite_difference_check


def naive_conv(x, w, b, stride, padding):
    """Six nested loops; the reference for conv2d."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[bi, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


class TestTensor:
    def test_default_dtype_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor(np.zeros(2)).dtype == np.float64

    def test_item_and_shape(self):
        t = Tensor(np.full((1, 1, 1, 1), 3.5))
        assert t.item() == 3.5
        assert t.shape == (1, 1, 1, 1)

    def test_no_grad_builds_no_tape(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with no_grad():
            y = ag.relu(x)
        assert not y.requires_grad


class TestConv2d:
    def test_table1_first_layer_shape(self):
        x = Tensor(np.zeros((1, 3, 51, 51), np.float32))
        w = Tensor(np.zeros((32, 3, 7, 7), np.float32))
        assert ag.conv2d(x, w).shape == (1, 32, 45, 45)

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 6))
        out = ag.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_computed(self):
        x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
        out = ag.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 2), (2, 1)])
    def test_matches_naive_loops(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.standard_normal((2, 8, 16, 16))
        w = rng.standard_normal((4, 8, 3, 3))
        b = rng.standard_normal(4)
        out = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), rtol=1e-5, atol=1e-10)

    def test_downconv_floors(self):
        x = Tensor(np.zeros((1, 32, 45, 45)))
        assert ag.conv2d(x, Tensor(np.zeros((32, 32, 2, 2))), stride=2).shape == (1, 32, 22, 22)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ag.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(ConfigurationError):
            ag.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 6, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        r = finite_difference_check(lambda t: ag.total(ag.conv2d(t, Tensor(w), stride=2, padding=1)), x)
        assert r.passed, r.line()


class TestPointwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_all_negative(self):
        assert not ag.relu(Tensor(-np.ones((1, 2, 3, 3)))).data.any()

    def test_relu_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        backward(ag.total(ag.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        backward(ag.total(ag.relu(x)))
        np.testing.assert_array_equal(x.grad, 0)

    def test_sigmoid(self):
        assert ag.sigmoid(Tensor(np.zeros(1))).item() == 0.5
        assert abs(ag.sigmoid(Tensor(np.array([100.0]))).item() - 1) < 1e-6
        y = ag.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
        assert np.all(np.isfinite(y.data))

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        backward(ag.total(ag.sigmoid(x)))
        assert x.grad[0] == 0.25

    def test_mul(self):
        a = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(ag.mul(Tensor(a), Tensor(np.ones_like(a))).data, a)
        assert not ag.mul(Tensor(a), Tensor(np.zeros_like(a))).data.any()

    def test_mul_gradient_is_other_factor(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        b = rng.standard_normal((1, 1, 2, 2))
        backward(ag.total(ag.mul(a, Tensor(b))))
        np.testing.assert_array_equal(a.grad, b)

    def test_mul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.mul(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))

    def test_pointwise_locality(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 4, 4))
        y = x.copy()
        y[0, 1, 2, 3] += 1.0
        for op in (ag.relu, ag.sigmoid):
            a, b = op(Tensor(x)).data, op(Tensor(y)).data
            changed = np.argwhere(a != b)
            assert all(tuple(c) == (0, 1, 2, 3) for c in changed)


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 3, 7, 5)) * 4 + 2
        out = ag.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            np.zeros(3), np.ones(3), training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_update(self):
        x = np.random.default_rng(1).standard_normal((1, 2, 4, 4)) + 3
        rm, rv = np.zeros(2), np.ones(2)
        ag.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_eval_identity(self):
        x = np.random.default_rng(2).standard_normal((1, 2, 3, 3))
        out = ag.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                            np.zeros(2), np.ones(2), training=False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5))

    def test_empty_spatial(self):
        with pytest.raises(ConfigurationError):
            ag.batch_norm(Tensor(np.zeros((1, 2, 0, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          np.zeros(2), np.ones(2), True)

    def test_gradient_tight(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 4, 4))
        probe = rng.standard_normal(x.shape)
        fn = lambda t: ag.total(ag.mul(ag.batch_norm(t, Tensor(np.array([1.3, 0.7])),
                                                     Tensor(np.array([0.1, -0.2])),
                                                     np.zeros(2), np.ones(2), True),
                                       Tensor(probe)))
        r = finite_difference_check(fn, x, tolerance=1e-5)
        assert r.passed, r.line()


class TestBackward:
    def test_sum_gradient_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 5)), requires_grad=True)
        backward(ag.total(x))
        np.testing.assert_array_equal(x.grad, 1)

    def test_square_gradient(self):
        v = np.random.default_rng(1).standard_normal((1, 1, 3, 3))
        x = Tensor(v, requires_grad=True)
        backward(ag.total(ag.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * v)

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True))

    def test_unreachable_parameters_zero(self):
        a = Parameter(np.ones((2,)), name="a")
        b = Parameter(np.ones((3,)), name="b")
        grads = backward(ag.total(a), {"a": a, "b": b})
        np.testing.assert_array_equal(grads["b"], np.zeros(3))
        np.testing.assert_array_equal(grads["a"], np.ones(2))

    def test_linearity(self):
        rng = np.random.default_rng(5)
        v = rng.standard_normal((1, 1, 3, 3))
        w = rng.standard_normal((1, 1, 3, 3))
        l1 = lambda t: ag.total(ag.mul(t, Tensor(w)))
        l2 = lambda t: ag.total(ag.sigmoid(t))
        grads = []
        for f in (l1, l2, lambda t: ag.add(l1(t), l2(t))):
            x = Tensor(v.copy(), requires_grad=True)
            backward(f(x))
            grads.append(x.grad)
        np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-12)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ag.mul(x, x)
        backward(ag.total(ag.add(y, y)))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = ag.scale(y, 1.0)
        backward(ag.total(y))
        assert x.grad[0] == 1.0


class TestShuffle:
    def test_ramp_channel_order(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = ag.pixel_unshuffle(Tensor(x), 4)
        assert out.shape == (1, 16, 1, 1)
        np.testing.assert_array_equal(out.data.reshape(-1), np.arange(16))

    def test_r1_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(ag.pixel_unshuffle(Tensor(x), 1).data, x)
        np.testing.assert_array_equal(ag.pixel_shuffle(Tensor(x), 1).data, x)

    def test_element_mapping(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 8, 12))
        out = ag.pixel_unshuffle(Tensor(x), 4).data
        for n, c, y, xx, dy, dx in [(0, 0, 0, 0, 0, 0), (1, 2, 1, 2, 3, 1), (0, 1, 1, 0, 2, 3)]:
            assert out[n, c * 16 + dy * 4 + dx, y, xx] == x[n, c, y * 4 + dy, xx * 4 + dx]

    def test_non_divisible(self):
        with pytest.raises(DimensionError):
            ag.pixel_unshuffle(Tensor(np.zeros((1, 1, 6, 8))), 4)
        with pytest.raises(DimensionError):
            ag.pixel_shuffle(Tensor(np.zeros((1, 15, 2, 2))), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
           st.integers(0, 2**31 - 1))
    def test_round_trip(self, c, r, hq, wq, seed):
        x = np.random.default_rng(seed).standard_normal((1, c, hq * r, wq * r))
        down = ag.pixel_unshuffle(Tensor(x), r)
        np.testing.assert_array_equal(ag.pixel_shuffle(down, r).data, x)
        np.testing.assert_array_equal(np.sort(down.data, axis=None), np.sort(x, axis=None))


class TestFiniteDifference:
    def test_sum_of_squares(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 3, 4))
        r = finite_difference_check(lambda t: ag.total(ag.mul(t, t)), x, tolerance=1e-6)
        assert r.passed, r.line()

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 4, 4))
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        r = finite_difference_check(lambda t: ag.total(ag.relu(t)), x)
        assert r.passed and r.skipped == 0

    def test_detects_wrong_gradient(self):
        def bad(t):
            y = t.data ** 2
            return Tensor.from_op(y.sum(keepdims=True), (t,), lambda g: (g * 3 * t.data,), "bad")

        r = finite_difference_check(bad, np.ones((1, 1, 2, 2)))
        assert not r.passed

    def test_skips_kink_crossings(self):
        x = np.array([[[[1e-6, 0.5, -0.5]]]])
        r = finite_difference_check(lambda t: ag.total(ag.relu(t)), x, step=1e-5)
        assert r.skipped == 1 and r.checked == 2 and r.passed
