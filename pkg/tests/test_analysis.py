import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pouformer.analysis import (
    check_softmax_lipschitz,
    covering_number_bound,
    format_checks,
    generalization_proxy,
    local_mean_values,
    log_param_lipschitz,
    loglog_slope,
    param_lipschitz_probe,
    rate_sweep,
    sine_sum_residual,
    softmax_l1_gap,
    verify_construction,
)
from pouformer.construction import assemble
from pouformer.numeric_core import NumericError
from pouformer.softpou import PouConfig
from pouformer.targets import linear1d, sin1d

mpmath.mp.dps = 60


@pytest.fixture(scope="module")
def small():
    return assemble(linear1d(), PouConfig(0.35))


def mp_sine_residual(M, P):
    th = [2 * mpmath.pi * j / P for j in range(1, P + 1)]
    w = [mpmath.exp(M * mpmath.cos(t)) for t in th]
    return float(abs(sum(wi * mpmath.sin(t) for wi, t in zip(w, th))) / sum(w))


class TestSoftmaxLipschitz:
    def test_hand_pair(self):
        lhs, rhs = softmax_l1_gap([1.0, 0.0], [0.0, 0.0])
        # |sigma(1) - 1/2| twice, which is tanh(1/2).
        assert lhs == pytest.approx(math.tanh(0.5), rel=1e-14)
        assert lhs == pytest.approx(0.46212, abs=1e-5)
        assert rhs == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(NumericError):
            softmax_l1_gap([0.0, 1.0], [0.0, 1.0, 2.0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 64), st.integers(0, 2**32 - 1), st.floats(1e-6, 50.0))
    def test_holds(self, n, seed, scale):
        rng = np.random.default_rng(seed)
        a = scale * rng.normal(size=n)
        b = a + scale * rng.normal(size=n) * rng.uniform()
        assert check_softmax_lipschitz(a, b)


class TestSineSum:
    def test_matches_mpmath(self):
        for P in (2, 3, 7, 16, 33):
            for M in (0.0, 1.0, 10.0):
                assert sine_sum_residual(M, P) <= mp_sine_residual(M, P) + 1e-15

    def test_small_everywhere(self):
        worst = max(sine_sum_residual(M, P) for P in range(2, 65) for M in (0, 1, 10, 100, 700))
        assert worst <= 1e-10

    def test_rejects_bad_input(self):
        with pytest.raises(NumericError):
            sine_sum_residual(1.0, 1)
        with pytest.raises(NumericError):
            sine_sum_residual(-1.0, 4)


class TestCapacityBounds:
    def test_covering_lead(self):
        assert covering_number_bound(1, 1, 1, 1, 1) == pytest.approx(math.log(1224256), rel=1e-15)
        assert covering_number_bound(1, 1, 1, 1, 1) == pytest.approx(14.01784, abs=1e-5)

    def test_covering_scaling(self):
        want = 3 * (math.log(1224256) + 4 * math.log(2) + 22 * math.log(5) + 26 * math.log(7)
                    - math.log(0.01))
        assert covering_number_bound(3, 2, 5, 7, 0.01) == pytest.approx(want, rel=1e-14)

    def test_covering_rejects_nonpositive(self):
        with pytest.raises(NumericError):
            covering_number_bound(1, 1, 1, 1, 0)

    def test_lipschitz_constant(self):
        assert log_param_lipschitz(1, 1, 1) == pytest.approx(math.log(612128), rel=1e-15)
        want = float(mpmath.log(612128 * mpmath.mpf(3) ** 4 * 9**22 * mpmath.mpf(1e4) ** 25))
        assert log_param_lipschitz(3, 9, 1e4) == pytest.approx(want, rel=1e-14)


class TestProbe:
    def test_zero_delta(self, small):
        rep = param_lipschitz_probe(small.params, 0.0, trials=3)
        assert rep.passed and rep.max_change == 0.0

    def test_negative_delta(self, small):
        with pytest.raises(NumericError):
            param_lipschitz_probe(small.params, -1.0, trials=1)

    def test_linear_in_delta(self, small):
        deltas = [1e-8, 1e-7, 1e-6]
        reps = [param_lipschitz_probe(small.params, dl, trials=5, seed=1) for dl in deltas]
        assert all(r.passed for r in reps)
        slope, _, r2 = loglog_slope(deltas, [r.max_change for r in reps])
        assert slope <= 1.1 and r2 > 0.99


class TestSlopes:
    def test_exact_power_law(self):
        x = np.array([1.0, 2.0, 4.0, 8.0])
        slope, icpt, r2 = loglog_slope(x, 3 * x**-0.5)
        assert slope == pytest.approx(-0.5, rel=1e-12)
        assert icpt == pytest.approx(math.log(3), rel=1e-12)
        assert r2 == pytest.approx(1.0)

    def test_local_means(self):
        X = np.array([[0.1], [0.15], [0.9]])
        y = np.array([1.0, 3.0, 5.0])
        vals = local_mean_values(np.array([[0.12], [0.5], [0.95]]), X, y, 0.1)
        # Center 0.5 has no sample in range and takes its nearest one (0.15).
        np.testing.assert_allclose(vals, [2.0, 3.0, 5.0])

    def test_rate_sweep_sin1d(self):
        rep = rate_sweep(sin1d(), [0.35, 0.25, 0.18, 0.12, 0.08], threads=1)
        assert rep.passed
        assert abs(rep.slope - 1.0) <= 0.15 and rep.r2 >= 0.95
        assert all(e <= eps for e, eps in zip(rep.extras["sup_error"], rep.xs))
        assert json.loads(rep.to_json())["slope"] == rep.slope

    def test_rate_sweep_needs_four(self):
        with pytest.raises(ValueError):
            rate_sweep(sin1d(), [0.3, 0.2, 0.1])

    def test_proxy_validates_sizes(self):
        with pytest.raises(ValueError):
            generalization_proxy(sin1d(), 0.1, [100, 200, 400])
        with pytest.raises(ValueError):
            generalization_proxy(sin1d(), 0.1, [10, 200, 400, 800])

    def test_proxy_deterministic(self):
        a = generalization_proxy(sin1d(), 0.1, [100, 200, 400, 800], seed=3, replicates=2,
                                 n_eval=1000, threads=1)
        b = generalization_proxy(sin1d(), 0.1, [100, 200, 400, 800], seed=3, replicates=2,
                                 n_eval=1000, threads=4)
        assert a.to_csv() == b.to_csv()
        assert a.measured[-1] < a.measured[0]


class TestVerify:
    def test_all_pass(self, small):
        res = verify_construction(small, linear1d(), n_points=50, n_scan=2000, probe_trials=2)
        names = [r.name for r in res]
        for n in ("architecture", "parameter_count", "restoration", "implementation_error",
                  "impl_bound_is_half_eps", "network_sup_error", "covering"):
            assert n in names
        assert all(r.passed for r in res), format_checks(res)

    def test_format(self, small):
        res = verify_construction(small, None, n_points=10, probe_trials=1)
        text = format_checks(res)
        assert text.splitlines()[0].startswith("check")
        assert "PASS" in text
