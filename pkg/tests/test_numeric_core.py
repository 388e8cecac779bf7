import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pouformer.numeric_core import NumericError, log_sum_exp, matmul, relu, stable_softmax

mpmath.mp.dps = 50


def mp_softmax(v):
    e = [mpmath.exp(mpmath.mpf(float(x))) for x in v]
    s = sum(e)
    return np.array([float(x / s) for x in e])


def loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


finite_vec = arrays(np.float64, st.integers(1, 40),
                    elements=st.floats(-700, 700, allow_nan=False, allow_infinity=False))


class TestStableSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(stable_softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=1e-15)

    def test_huge_logits_against_mpmath(self):
        # exp(1000) overflows; the second entry underflows in float64 and mpmath agrees it is ~e^-1000.
        got = stable_softmax([1000.0, 0.0])
        np.testing.assert_allclose(got, mp_softmax([1000.0, 0.0]), rtol=1e-15, atol=1e-300)
        assert got[0] == 1.0

    def test_shift_invariance(self):
        v = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(stable_softmax(v + 123.0), stable_softmax(v), rtol=1e-14)

    def test_axis_zero_is_columnwise(self):
        a = np.array([[0.0, 1.0], [2.0, 1.0]])
        out = stable_softmax(a, axis=0)
        np.testing.assert_allclose(out.sum(axis=0), [1.0, 1.0], rtol=1e-15)
        np.testing.assert_allclose(out[:, 1], [0.5, 0.5], rtol=1e-15)

    @pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [np.inf, 0.0], [-np.inf, 0.0]])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(NumericError):
            stable_softmax(np.array(bad, dtype=float))

    @settings(max_examples=200, deadline=None)
    @given(finite_vec)
    def test_matches_mpmath(self, v):
        np.testing.assert_allclose(stable_softmax(v), mp_softmax(v), rtol=1e-12, atol=1e-300)

    @settings(max_examples=200, deadline=None)
    @given(finite_vec)
    def test_sums_to_one_and_positive(self, v):
        w = stable_softmax(v)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w >= 0)
        if np.ptp(v) <= 700:
            # Within this spread every weight stays above the float64 underflow threshold.
            assert np.all(w > 0)


class TestLogSumExp:
    def test_simple(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), rel=1e-15)

    def test_large(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), rel=1e-15)

    def test_rejects_empty_and_nan(self):
        with pytest.raises(NumericError):
            log_sum_exp([])
        with pytest.raises(NumericError):
            log_sum_exp([1.0, np.nan])

    @settings(max_examples=100, deadline=None)
    @given(finite_vec)
    def test_matches_mpmath(self, v):
        want = float(mpmath.log(sum(mpmath.exp(mpmath.mpf(float(x))) for x in v)))
        assert log_sum_exp(v) == pytest.approx(want, rel=1e-13, abs=1e-13)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu([-1.0, 0.0, 2.5]), [0.0, 0.0, 2.5])

    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            relu([np.nan])

    @given(arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)))
    def test_identity_split(self, v):
        np.testing.assert_array_equal(relu(v) - relu(-v), v)


class TestMatmul:
    def test_against_loops(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(matmul(a, b), loop_matmul(a, b), rtol=1e-13, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(NumericError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_rejects_vectors(self):
        with pytest.raises(NumericError):
            matmul(np.zeros(3), np.zeros((3, 1)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_associative(self, n, k, m, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=(m, 3))
        np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)),
                                   rtol=1e-10, atol=1e-12)
