import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkn import autograd as ag
from dkn.autograd import Tensor
from dkn.errors import ConfigurationError, ContractError
from dkn.filtering import (GridSpec, bicubic_resize, bilinear_sample, check_kernels,
                           deformable_weighted_average, restrict_offsets)
from dkn.gradcheck import finite_difference_check


def brute_bilinear(img, x, y):
    """Sum over all pixels of max(0, 1-|x-j|) * max(0, 1-|y-i|) * img[i, j]."""
    h, w = img.shape
    x = min(max(x, 0), w - 1)
    y = min(max(y, 0), h - 1)
    total = 0.0
    for i in range(h):
        for j in range(w):
            total += max(0, 1 - abs(x - j)) * max(0, 1 - abs(y - i)) * img[i, j]
    return total


def sample_at(img, x, y):
    pos = np.array([x, y], dtype=np.float64).reshape(1, 2, 1, 1)
    return bilinear_sample(Tensor(img[None, None].astype(np.float64)), Tensor(pos)).item()


def zero_offsets(grid, h, w, dtype=np.float64):
    return np.zeros((1, 2 * grid.taps, h, w), dtype=dtype)


class TestGridSpec:
    def test_base_layout(self):
        b = GridSpec(3).base(np.float64)
        # tap 0 is the top-left neighbor: (dx, dy) = (-1, -1); tap 5 is (1, 0)
        assert tuple(b[0:2]) == (-1, -1)
        assert tuple(b[10:12]) == (1, 0)
        assert b.sum() == 0

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            GridSpec(4)
        with pytest.raises(ConfigurationError):
            GridSpec(7, radius=2)


class TestBilinear:
    def test_integer_position(self):
        img = np.random.default_rng(0).standard_normal((8, 6))
        assert sample_at(img, 3, 5) == img[5, 3]

    def test_center_of_square(self):
        assert sample_at(np.array([[1.0, 2.0], [3.0, 4.0]]), 0.5, 0.5) == 2.5

    def test_quarter_position(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        # expansion 1*.75*.25 + 2*.25*.25 + 3*.75*.75 + 4*.25*.75
        assert sample_at(img, 0.25, 0.75) == pytest.approx(2.75, abs=1e-12)
        assert sample_at(img, 0.25, 0.75) == pytest.approx(brute_bilinear(img, 0.25, 0.75))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((5, 7))
        for x, y in rng.uniform(-2, 9, size=(40, 2)):
            assert sample_at(img, x, y) == pytest.approx(brute_bilinear(img, x, y), abs=1e-12)

    def test_out_of_range_clamps(self):
        img = np.arange(12, dtype=np.float64).reshape(3, 4)
        assert sample_at(img, -5.0, -3.0) == img[0, 0]
        assert sample_at(img, 10.0, 1.0) == img[1, 3]

    def test_affine_exact(self):
        rng = np.random.default_rng(2)
        yy, xx = np.mgrid[0:9, 0:11].astype(np.float64)
        a, b, c = 0.7, -1.3, 0.4
        img = a * xx + b * yy + c
        for x, y in rng.uniform(0, [10, 8], size=(50, 2)):
            assert sample_at(img, x, y) == pytest.approx(a * x + b * y + c, abs=1e-5)

    def test_channel_layout(self):
        rng = np.random.default_rng(3)
        img = rng.standard_normal((1, 2, 4, 4))
        pos = rng.uniform(0, 3, (1, 6, 2, 2))
        out = bilinear_sample(Tensor(img), Tensor(pos)).data
        assert out.shape == (1, 6, 2, 2)
        for c in range(2):
            for t in range(3):
                x, y = pos[0, 2 * t, 1, 0], pos[0, 2 * t + 1, 1, 0]
                assert out[0, c * 3 + t, 1, 0] == pytest.approx(brute_bilinear(img[0, c], x, y))

    def test_left_continuous_kink(self):
        # at integer x the position derivative is the left difference
        img = np.array([[0.0, 1.0, 5.0]])
        pos = Tensor(np.array([1.0, 0.0]).reshape(1, 2, 1, 1), requires_grad=True)
        ag.backward(ag.total(bilinear_sample(Tensor(img[None, None]), pos)))
        assert pos.grad[0, 0, 0, 0] == 1.0

    def test_gradient_zero_when_clamped(self):
        img = np.random.default_rng(4).standard_normal((1, 1, 3, 3))
        pos = Tensor(np.array([-1.5, 1.5]).reshape(1, 2, 1, 1), requires_grad=True)
        ag.backward(ag.total(bilinear_sample(Tensor(img), pos)))
        assert pos.grad[0, 0, 0, 0] == 0.0


class TestRestrict:
    def test_zero_passthrough(self):
        g = GridSpec(3)
        out = restrict_offsets(Tensor(zero_offsets(g, 3, 3)), g)
        assert not out.data.any()

    def test_clamp_example(self):
        g = GridSpec(3)
        raw = zero_offsets(g, 1, 1)
        t = 8  # tap (i, j) = (2, 2): base displacement (1, 1)
        raw[0, 2 * t, 0, 0] = 10.0
        raw[0, 2 * t + 1, 0, 0] = -3.0
        out = restrict_offsets(Tensor(raw), g).data
        disp = out[0, 2 * t:2 * t + 2, 0, 0] + g.base(np.float64)[2 * t:2 * t + 2]
        np.testing.assert_array_equal(disp, [7, -2])

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([3, 5, 7]), st.floats(0.5, 50), st.integers(0, 2**31 - 1))
    def test_window_and_idempotent(self, k, spread, seed):
        g = GridSpec(k)
        raw = np.random.default_rng(seed).normal(0, spread, (1, 2 * g.taps, 4, 5))
        once = restrict_offsets(Tensor(raw), g).data
        disp = once + g.base(np.float64)[None, :, None, None]
        assert np.all(np.abs(disp) <= 7)
        np.testing.assert_array_equal(restrict_offsets(Tensor(once), g).data, once)
        inside = np.abs(raw + g.base(np.float64)[None, :, None, None]) <= 7
        np.testing.assert_array_equal(once[inside], raw[inside])

    def test_gradient_masked(self):
        g = GridSpec(3)
        raw = zero_offsets(g, 1, 1)
        raw[0, 0] = 20.0
        t = Tensor(raw, requires_grad=True)
        ag.backward(ag.total(restrict_offsets(t, g)))
        assert t.grad[0, 0, 0, 0] == 0 and t.grad[0, 1, 0, 0] == 1


class TestWeightedAverage:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.grid = GridSpec(3)
        self.target = self.rng.standard_normal((1, 1, 9, 10))

    def test_residual_zero_kernel(self):
        k = np.zeros((1, 9, 9, 10))
        out = deformable_weighted_average(self.target, k, zero_offsets(self.grid, 9, 10),
                                          self.grid, residual=True)
        np.testing.assert_array_equal(out.data, self.target)

    def test_identity_kernel(self):
        k = np.zeros((1, 9, 9, 10))
        k[:, 4] = 1.0
        out = deformable_weighted_average(self.target, k, zero_offsets(self.grid, 9, 10),
                                          self.grid, residual=False)
        np.testing.assert_array_equal(out.data, self.target)

    def test_box_filter_on_ramp(self):
        yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
        ramp = (0.3 * xx + 1.1 * yy)[None, None]
        k = np.full((1, 9, 8, 8), 1 / 9)
        out = deformable_weighted_average(ramp, k, zero_offsets(self.grid, 8, 8),
                                          self.grid, residual=False).data
        # oracle: explicit 9-tap mean
        oracle = np.zeros((6, 6))
        for i in range(1, 7):
            for j in range(1, 7):
                oracle[i - 1, j - 1] = ramp[0, 0, i - 1:i + 2, j - 1:j + 2].mean()
        np.testing.assert_allclose(out[0, 0, 1:7, 1:7], oracle, atol=1e-12)
        np.testing.assert_allclose(out[0, 0, 1:7, 1:7], ramp[0, 0, 1:7, 1:7], atol=1e-12)

    def test_constant_preserved(self):
        k = self.rng.uniform(0, 1, (1, 9, 6, 6))
        k /= k.sum(axis=1, keepdims=True)
        off = self.rng.uniform(-3, 3, (1, 18, 6, 6))
        out = deformable_weighted_average(np.full((1, 1, 6, 6), 0.37), k, off, self.grid, False)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-12)

    def test_linear_in_target(self):
        k = self.rng.standard_normal((1, 9, 9, 10))
        off = self.rng.uniform(-2, 2, (1, 18, 9, 10))
        other = self.rng.standard_normal(self.target.shape)
        f = lambda t: deformable_weighted_average(t, k, off, self.grid, False).data
        np.testing.assert_allclose(f(2 * self.target + 3 * other),
                                   2 * f(self.target) + 3 * f(other), atol=1e-10)

    def test_centers_subset(self):
        k = self.rng.standard_normal((1, 9, 9, 10))
        off = self.rng.uniform(-2, 2, (1, 18, 9, 10))
        full = deformable_weighted_average(self.target, k, off, self.grid, True).data
        ys, xs = np.array([1, 5]), np.array([0, 4, 8])
        sub = deformable_weighted_average(self.target, k[:, :, ys][:, :, :, xs],
                                          off[:, :, ys][:, :, :, xs], self.grid, True,
                                          centers=(ys, xs)).data
        np.testing.assert_array_equal(sub, full[:, :, ys][:, :, :, xs])

    def test_contract_check(self):
        k = np.full((1, 9, 2, 2), 0.5)
        with pytest.raises(ContractError):
            deformable_weighted_average(np.zeros((1, 1, 2, 2)), k, zero_offsets(self.grid, 2, 2),
                                        self.grid, residual=True, validate=True)
        with pytest.raises(ContractError):
            check_kernels(-np.full((1, 9, 1, 1), 1 / 9), residual=False)

    def test_offset_gradient(self):
        h = w = 7
        absolute = self.rng.uniform(0.2, 5.8, (1, 18, h, w))
        frac = absolute - np.floor(absolute)
        absolute += np.where(frac < 0.05, 0.1, 0) - np.where(frac > 0.95, 0.1, 0)
        base = self.grid.base(np.float64)[None, :, None, None]
        lattice = np.where(np.arange(18)[None, :, None, None] % 2 == 0,
                           np.arange(w)[None, None, None, :], np.arange(h)[None, None, :, None])
        off = absolute - base - lattice
        k = self.rng.standard_normal((1, 9, h, w))
        target = self.rng.standard_normal((1, 1, h, w))
        fn = lambda t: ag.total(deformable_weighted_average(target, Tensor(k), t, self.grid, True))
        r = finite_difference_check(fn, off, tolerance=1e-4)
        assert r.passed and r.skipped == 0, r.line()


class TestBicubic:
    def test_same_size_copy(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 7)).astype(np.float32)
        out = bicubic_resize(x, 5, 7)
        np.testing.assert_array_equal(out, x)
        assert out is not x and out.dtype == np.float32

    @pytest.mark.parametrize("size", [(3, 5), (16, 16), (40, 12)])
    def test_constant(self, size):
        x = np.full((1, 2, 8, 8), 0.625)
        np.testing.assert_allclose(bicubic_resize(x, *size), 0.625, atol=1e-12)

    def test_ramp_downsample(self):
        yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
        ramp = (0.1 * xx + 0.05 * yy)[None, None]
        out = bicubic_resize(ramp, 4, 4)[0, 0]
        # half-pixel alignment: output (i, j) sits at input (2i + 0.5, 2j + 0.5)
        cy, cx = np.mgrid[0:4, 0:4] * 2 + 0.5
        analytic = 0.1 * cx + 0.05 * cy
        np.testing.assert_allclose(out[1:3, 1:3], analytic[1:3, 1:3], atol=1e-4)

    def test_cubic_reproduction_interior(self):
        # the a=-0.5 kernel reproduces quadratics exactly away from the border
        x = np.linspace(0, 1, 32)
        img = (x[:, None] ** 2 + 0.5 * x[None, :])[None, None]
        up = bicubic_resize(img, 64, 64)[0, 0]
        src = (np.arange(64) + 0.5) / 2 - 0.5
        v = src / 31
        analytic = v[:, None] ** 2 + 0.5 * v[None, :]
        np.testing.assert_allclose(up[8:-8, 8:-8], analytic[8:-8, 8:-8], atol=1e-9)
