"""Tensor op tests: naive-loop oracles for conv, finite differences for every
gradient, and closed-form values for the probability ops."""

import numpy as np
import pytest

from scenekd import ops
from scenekd.errors import DimensionError, InputError, SpecError
from scenekd.gradcheck import check_grad, max_rel_error, numerical_grad
from scenekd.ops import ConvSpec


def naive_conv2d(x, w, b, spec):
    """Six-nested-loop reference convolution."""
    n, _, h, wdt = x.shape
    oh, ow = spec.out_hw(h, wdt)
    p, s = spec.padding, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for o in range(spec.out_channels):
            g = o // og
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(cg):
                        for ki in range(spec.kernel_h):
                            for kj in range(spec.kernel_w):
                                acc += xp[ni, g * cg + c, i * s + ki, j * s + kj] * w[o, c, ki, kj]
                    out[ni, o, i, j] = acc
    return out


CONV_SPECS = [
    ConvSpec(3, 4, 3, 3, stride=2, padding=1),
    ConvSpec(1, 1, 3, 3, stride=1, padding=0),
    ConvSpec(4, 4, 3, 3, stride=1, padding=1, groups=4),
    ConvSpec(4, 4, 3, 3, stride=2, padding=1, groups=4),
    ConvSpec(4, 6, 1, 1),
    ConvSpec(4, 4, 3, 3, stride=2, padding=1, groups=2),
    ConvSpec(2, 2, 2, 2, stride=1, padding=0, groups=2),
]


def _conv_instance(spec, seed, h=7, w=6):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, spec.in_channels, h, w))
    wt = rng.standard_normal((spec.out_channels, spec.in_channels // spec.groups,
                              spec.kernel_h, spec.kernel_w)) * 0.4
    b = rng.standard_normal(spec.out_channels) * 0.1
    return x, wt, b


class TestConv2d:
    def test_all_ones_single_window(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out = ops.conv2d(x, w, np.zeros(1), ConvSpec(1, 1, 3, 3))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = ops.conv2d(x, w, np.zeros(3), ConvSpec(3, 3, 3, 3, padding=1))
        np.testing.assert_allclose(out, x, atol=1e-12)

    @pytest.mark.parametrize("spec", CONV_SPECS)
    def test_matches_naive_loop_oracle(self, spec):
        x, w, b = _conv_instance(spec, seed=11)
        got = ops.conv2d(x, w, b, spec)
        ref = naive_conv2d(x, w, b, spec)
        assert np.abs(got - ref).max() <= 1e-6

    def test_strided_random_against_oracle(self):
        spec = ConvSpec(3, 4, 3, 3, stride=2, padding=1)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = np.zeros(4)
        np.testing.assert_allclose(ops.conv2d(x, w, b, spec),
                                   naive_conv2d(x, w, b, spec), atol=1e-6)

    def test_shape_validation(self):
        spec = ConvSpec(3, 4, 3, 3)
        with pytest.raises(DimensionError):
            ops.conv2d(np.zeros((2, 2, 5, 5)), np.zeros((4, 3, 3, 3)), np.zeros(4), spec)
        with pytest.raises(DimensionError):
            ops.conv2d(np.zeros((2, 3, 5, 5)), np.zeros((4, 3, 2, 3)), np.zeros(4), spec)
        with pytest.raises(DimensionError):
            ops.conv2d(np.zeros((3, 5, 5)), np.zeros((4, 3, 3, 3)), np.zeros(4), spec)

    def test_spec_validation(self):
        with pytest.raises(SpecError):
            ConvSpec(3, 4, 3, 3, groups=2)
        with pytest.raises(SpecError):
            ConvSpec(0, 4, 3, 3)
        with pytest.raises(SpecError):
            ConvSpec(3, 4, 3, 3, padding=-1)

    def test_too_small_input(self):
        with pytest.raises(DimensionError):
            ConvSpec(1, 1, 5, 5).out_hw(3, 3)


class TestConv2dBackward:
    def test_zero_upstream(self):
        spec = ConvSpec(3, 4, 3, 3, padding=1)
        x, w, b = _conv_instance(spec, seed=1)
        go = np.zeros((2, 4, 7, 6))
        gi, gw, gb = ops.conv2d_backward(go, x, w, spec)
        assert not gi.any() and not gw.any() and not gb.any()

    def test_single_pixel_pointwise(self):
        x = np.array([[[[2.0]]]])
        w = np.array([[[[3.0]]]])
        go = np.array([[[[5.0]]]])
        gi, gw, gb = ops.conv2d_backward(go, x, w, ConvSpec(1, 1, 1, 1))
        assert gw[0, 0, 0, 0] == 10.0  # grad_out * input
        assert gi[0, 0, 0, 0] == 15.0
        assert gb[0] == 5.0

    @pytest.mark.parametrize("spec", CONV_SPECS)
    def test_finite_differences(self, spec):
        x, w, b = _conv_instance(spec, seed=21)
        rng = np.random.default_rng(22)
        go = rng.standard_normal(ops.conv2d(x, w, b, spec).shape)
        gi, gw, gb = ops.conv2d_backward(go, x, w, spec)
        check_grad(lambda v: float((ops.conv2d(v, w, b, spec) * go).sum()), x, gi)
        check_grad(lambda v: float((ops.conv2d(x, v, b, spec) * go).sum()), w, gw)
        check_grad(lambda v: float((ops.conv2d(x, w, v, spec) * go).sum()), b, gb)

    def test_grad_out_shape_check(self):
        spec = ConvSpec(3, 4, 3, 3, padding=1)
        x, w, _ = _conv_instance(spec, seed=2)
        with pytest.raises(DimensionError):
            ops.conv2d_backward(np.zeros((2, 4, 3, 3)), x, w, spec)


class TestGRN:
    def test_zero_affine_is_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 4, 4))
        out = ops.grn(x, np.zeros(3), np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_identical_channels(self):
        rng = np.random.default_rng(6)
        base = rng.standard_normal((2, 1, 4, 4))
        x = np.repeat(base, 3, axis=1)
        gamma, beta = np.full(3, 0.5), np.full(3, 0.2)
        out = ops.grn(x, gamma, beta)
        # all channels share the energy, so the norm statistic is ~1 everywhere
        np.testing.assert_allclose(out, (1 + 0.5) * x + 0.2, rtol=1e-5)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 4, 3, 3))
        gamma = rng.standard_normal(4)
        a = 3.7
        y1 = ops.grn(x, gamma, np.zeros(4))
        y2 = ops.grn(a * x, gamma, np.zeros(4))
        np.testing.assert_allclose(y2, a * y1, rtol=1e-5)

    def test_backward_zero_upstream(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 4, 4))
        gi, gg, gb = ops.grn_backward(np.zeros_like(x), x, np.full(3, 0.3))
        assert not gi.any() and not gg.any() and not gb.any()

    def test_backward_gamma_zero_identity_path(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 3, 4, 4))
        go = rng.standard_normal(x.shape)
        gi, _, _ = ops.grn_backward(go, x, np.zeros(3))
        np.testing.assert_array_equal(gi, go)

    def test_finite_differences(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 3, 4, 4))
        gamma = rng.standard_normal(3) * 0.5
        beta = rng.standard_normal(3) * 0.5
        go = rng.standard_normal(x.shape)
        gi, gg, gb = ops.grn_backward(go, x, gamma)
        check_grad(lambda v: float((ops.grn(v, gamma, beta) * go).sum()), x, gi)
        check_grad(lambda v: float((ops.grn(x, v, beta) * go).sum()), gamma, gg)
        check_grad(lambda v: float((ops.grn(x, gamma, v) * go).sum()), beta, gb)


class TestSimpleOps:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])),
                                      np.array([0.0, 0.0, 2.0]))

    def test_relu_backward_boundary_aware(self):
        # gradient passes strictly where x > 0; at exactly zero it is blocked
        x = np.array([-1.0, 0.0, 2.0])
        go = np.ones(3)
        np.testing.assert_array_equal(ops.relu_backward(go, x), [0.0, 0.0, 1.0])

    def test_relu_finite_differences_off_boundary(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 0.1] += 0.2  # keep away from the kink
        go = rng.standard_normal(x.shape)
        check_grad(lambda v: float((ops.relu(v) * go).sum()), x,
                   ops.relu_backward(go, x))

    def test_global_avg_pool_constant(self):
        x = np.full((2, 3, 4, 5), 7.5)
        np.testing.assert_array_equal(ops.global_avg_pool(x), np.full((2, 3), 7.5))

    def test_global_avg_pool_backward(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 3, 4, 4))
        go = rng.standard_normal((2, 3))
        check_grad(lambda v: float((ops.global_avg_pool(v) * go).sum()), x,
                   ops.global_avg_pool_backward(go, x.shape))

    def test_linear_identity(self):
        x = np.eye(4)[:2]
        out = ops.linear(x, np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(out, x)

    def test_linear_finite_differences(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((4, 5))
        b = rng.standard_normal(4)
        go = rng.standard_normal((3, 4))
        gi, gw, gb = ops.linear_backward(go, x, w)
        check_grad(lambda v: float((ops.linear(v, w, b) * go).sum()), x, gi)
        check_grad(lambda v: float((ops.linear(x, v, b) * go).sum()), w, gw)
        check_grad(lambda v: float((ops.linear(x, w, v) * go).sum()), b, gb)

    def test_linear_shape_check(self):
        with pytest.raises(DimensionError):
            ops.linear(np.zeros((2, 5)), np.zeros((4, 6)), np.zeros(4))


class TestBatchNorm:
    def test_identity_stats(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((2, 3, 4, 4))
        out = ops.batch_norm(x, np.zeros(3), np.ones(3) - 1e-6, np.ones(3), np.zeros(3))
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_finite_differences(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((2, 3, 4, 4))
        mean = rng.standard_normal(3) * 0.2
        var = rng.uniform(0.5, 2.0, 3)
        gamma = rng.standard_normal(3)
        beta = rng.standard_normal(3)
        go = rng.standard_normal(x.shape)
        gi, gg, gb = ops.batch_norm_backward(go, x, mean, var, gamma)
        check_grad(lambda v: float((ops.batch_norm(v, mean, var, gamma, beta) * go).sum()), x, gi)
        check_grad(lambda v: float((ops.batch_norm(x, mean, var, v, beta) * go).sum()), gamma, gg)
        check_grad(lambda v: float((ops.batch_norm(x, mean, var, gamma, v) * go).sum()), beta, gb)

    def test_stat_length_check(self):
        with pytest.raises(DimensionError):
            ops.batch_norm(np.zeros((1, 3, 2, 2)), np.zeros(2), np.ones(2),
                           np.ones(2), np.zeros(2))


class TestProbabilityOps:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(ops.softmax(np.zeros(3)), np.full(3, 1 / 3))

    def test_softmax_stability(self):
        out = ops.softmax(np.array([1000.0, 1000.5]))
        assert np.all(np.isfinite(out))
        assert abs(out.sum() - 1.0) < 1e-6

    def test_softmax_reference_values(self):
        out = ops.softmax(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-4)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(17)
        z = rng.standard_normal(6)
        np.testing.assert_allclose(ops.softmax(z), ops.softmax(z + 17.3), atol=1e-6)

    def test_log_softmax_consistency(self):
        rng = np.random.default_rng(18)
        z = rng.standard_normal((3, 5))
        np.testing.assert_allclose(np.exp(ops.log_softmax(z, axis=-1)),
                                   ops.softmax(z, axis=-1), atol=1e-12)

    def test_kl_identical_is_zero(self):
        p = ops.softmax(np.array([0.3, -1.0, 2.0]))
        assert ops.kl_div(p, np.log(p)) == 0.0

    def test_kl_closed_form(self):
        val = ops.kl_div(np.array([1.0, 0.0]), np.log(np.array([0.5, 0.5])))
        assert abs(val - np.log(2)) < 1e-9

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            p = ops.softmax(rng.standard_normal(5))
            q = ops.softmax(rng.standard_normal(5))
            assert ops.kl_div(p, np.log(q)) >= -1e-9

    def test_kl_input_checks(self):
        with pytest.raises(InputError):
            ops.kl_div(np.array([0.7, 0.7]), np.log(np.array([0.5, 0.5])))
        with pytest.raises(DimensionError):
            ops.kl_div(np.array([1.0, 0.0]), np.zeros(3))

    def test_cross_entropy_uniform(self):
        assert abs(ops.cross_entropy(np.zeros(10), 4) - np.log(10)) < 1e-9

    def test_cross_entropy_near_certain(self):
        z = np.zeros(5)
        z[2] = 30.0
        assert ops.cross_entropy(z, 2) < 1e-9

    def test_cross_entropy_reference_value(self):
        assert abs(ops.cross_entropy(np.array([1.0, 2.0, 3.0]), 2) - 0.40761) < 1e-4

    def test_cross_entropy_errors(self):
        with pytest.raises(InputError):
            ops.cross_entropy(np.zeros(3), 5)
        with pytest.raises(DimensionError):
            ops.cross_entropy(np.zeros((2, 3)), 0)

    def test_cross_entropy_batch_grad(self):
        rng = np.random.default_rng(20)
        z = rng.standard_normal((4, 6))
        y = rng.integers(0, 6, 4)
        g = ops.cross_entropy_batch_grad(z, y)
        num = numerical_grad(lambda v: ops.cross_entropy_batch(v, y), z)
        assert max_rel_error(g, num) < 1e-4


def test_randomized_gradient_sweep():
    """Bulk finite-difference coverage across ops on randomized small shapes."""
    rng = np.random.default_rng(99)
    failures = []
    for trial in range(25):
        n, c, h, w = rng.integers(1, 3), int(rng.integers(2, 5)), 4, 4
        x = rng.standard_normal((n, c, h, w))
        go = rng.standard_normal(x.shape)
        gamma = rng.standard_normal(c) * 0.5
        gi, _, _ = ops.grn_backward(go, x, gamma)
        err = max_rel_error(gi, numerical_grad(
            lambda v: float((ops.grn(v, gamma, np.zeros(c)) * go).sum()), x))
        if err >= 1e-4:
            failures.append(("grn", trial, err))
    assert not failures
