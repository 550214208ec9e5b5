import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protomixer.core_math import (
    finite_diff_check, gelu, gelu_grad, layer_norm, layer_norm_backward,
    layer_norm_forward, matmul, softmax_cross_entropy,
)
from protomixer.errors import DimensionError, ParameterError


def triple_loop(a, b):
    rows, inner = len(a), len(a[0])
    cols = len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            s = 0.0
            for t in range(inner):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def erf_series(x, terms=60):
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def phi_oracle(x):
    return 0.5 * (1.0 + erf_series(x / math.sqrt(2.0)))


finite_floats = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((2, 2))
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_example(self):
        assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])

    def test_matches_triple_loop(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a.tolist(), b.tolist()),
                                   rtol=1e-14, atol=1e-14)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_repeatable(self, rng):
        a = rng.standard_normal((17, 33))
        b = rng.standard_normal((33, 9))
        assert matmul(a, b).tobytes() == matmul(a, b).tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5),
           st.integers(0, 2 ** 32 - 1))
    def test_associativity(self, p, q, r, s, seed):
        g = np.random.default_rng(seed)
        a, b, c = (g.standard_normal(sh) for sh in ((p, q), (q, r), (r, s)))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        scale = np.abs(a).max() * np.abs(b).max() * np.abs(c).max() * q * r
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9 * scale)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        y = layer_norm(np.full(5, 3.7), np.ones(5), np.zeros(5))
        assert np.array_equal(y, np.zeros(5))

    def test_two_point(self):
        y = layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-5)
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(y, [expected, -expected], rtol=1e-15)
        assert abs(y[0] - 0.99999) < 1e-5

    def test_zero_gain_returns_bias(self, rng):
        b = rng.standard_normal(6)
        y = layer_norm(rng.standard_normal(6), np.zeros(6), b)
        assert np.array_equal(y, b)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=finite_floats))
    def test_moments(self, x):
        var = x.var()
        if var < 1e-3:
            return
        y = layer_norm(x, np.ones_like(x), np.zeros_like(x))
        assert abs(y.mean()) < 1e-10
        assert abs(y.var() - 1.0 / (1.0 + 1e-5 / var)) < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(4))

    def test_backward_finite_difference(self, rng):
        x = rng.standard_normal((3, 7))
        gain = rng.standard_normal(7)
        bias = rng.standard_normal(7)
        w = rng.standard_normal((3, 7))
        params = {"x": x, "gain": gain, "bias": bias}

        def loss():
            return float(np.sum(w * layer_norm(x, gain, bias)))

        _, cache = layer_norm_forward(x, gain, bias)
        dx, dg, db = layer_norm_backward(w, cache)
        rep = finite_diff_check(loss, params, {"x": dx, "gain": dg, "bias": db})
        assert rep.max_rel_error < 1e-6, str(rep)


class TestGelu:
    def test_zero(self):
        assert gelu(0.0) == 0.0

    def test_one(self):
        assert gelu(1.0) == pytest.approx(phi_oracle(1.0), abs=1e-14)
        assert gelu(1.0) == pytest.approx(0.8413447, abs=1e-7)

    def test_left_tail(self):
        bound = 10.0 * float(mpmath.ncdf(-10))
        assert abs(gelu(-10.0)) < 1e-8
        assert abs(gelu(-10.0)) <= bound * (1 + 1e-9)

    def test_matches_erf_series_on_grid(self):
        xs = np.linspace(-4, 4, 33)
        np.testing.assert_allclose(gelu(xs), [x * phi_oracle(x) for x in xs],
                                   atol=1e-13)

    def test_monotone_on_grid(self):
        # GELU dips below zero on the left and is increasing only past its
        # minimum near -0.7518; check the increasing branch on [-0.75, 6]
        # and the decreasing branch separately on [-6, -0.76]
        xs = np.linspace(-6, 6, 10_000)
        y = gelu(xs)
        x_min = -0.7517915246
        right = xs >= x_min
        assert np.all(np.diff(y[right]) >= 0)
        left = xs <= x_min
        assert np.all(np.diff(y[left]) <= 0)

    def test_derivative_oracle(self):
        x = 0.5
        oracle = phi_oracle(x) + x * math.exp(-x * x / 2) / math.sqrt(2 * math.pi)
        assert gelu_grad(x) == pytest.approx(oracle, rel=1e-13)
        p = {"x": np.array([x])}
        rep = finite_diff_check(lambda: float(gelu(p["x"])[0]), p,
                                {"x": np.array([oracle])})
        assert rep.max_rel_error < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss, grad = softmax_cross_entropy(np.zeros(3), 1)
        assert loss == pytest.approx(math.log(3), abs=1e-15)
        np.testing.assert_allclose(grad, [1 / 3, -2 / 3, 1 / 3])

    def test_saturated(self):
        loss, grad = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-300)
        np.testing.assert_allclose(grad, [0, 0], atol=1e-300)

    def test_high_precision_value(self):
        with mpmath.workdps(40):
            oracle = float(mpmath.log(mpmath.e + mpmath.e ** 2 + mpmath.e ** 3) - 3)
        loss, _ = softmax_cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
        assert loss == pytest.approx(oracle, rel=1e-14)
        assert loss == pytest.approx(0.40761, abs=1e-5)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros(3), 3)
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros(3), -1)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=finite_floats),
           st.data())
    def test_grad_sums_to_zero(self, logits, data):
        t = data.draw(st.integers(0, len(logits) - 1))
        _, grad = softmax_cross_entropy(logits, t)
        assert abs(grad.sum()) < 1e-12


class TestFiniteDiffCheck:
    def test_quadratic(self):
        p = {"theta": np.array([3.0])}
        rep = finite_diff_check(lambda: float(p["theta"][0] ** 2), p,
                                {"theta": np.array([6.0])}, h=1e-5)
        assert rep.max_rel_error * 6.0 < 1e-8

    def test_reports_location_of_bad_gradient(self):
        p = {"a": np.array([1.0, 2.0]), "b": np.array([[0.5, -1.0]])}

        def f():
            return float(np.sum(p["a"] ** 2) + np.sum(p["b"] ** 3))

        grads = {"a": 2 * p["a"], "b": 3 * p["b"] ** 2}
        grads["b"] = grads["b"].copy()
        grads["b"][0, 1] += 1.0
        rep = finite_diff_check(f, p, grads)
        assert not rep.passed
        assert rep.location == ("b", (0, 1))
        assert rep.checked == 4
        # parameters restored
        assert np.array_equal(p["a"], [1.0, 2.0])

    def test_step_range(self):
        p = {"x": np.zeros(1)}
        with pytest.raises(ParameterError):
            finite_diff_check(lambda: 0.0, p, {"x": np.zeros(1)}, h=1e-3)
