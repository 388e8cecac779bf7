import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pouformer.analysis import (
    attention_identities,
    check_preprocessing,
    check_restoration,
    readout_recompute_error,
)
from pouformer.construction import (
    ConstructionError,
    ConstructionMeta,
    angles,
    assemble,
    check_network_accuracy,
    choose_attention_scale,
    closed_form_param_count,
    construction_shape_ok,
    eta,
    implementation_error_bound,
    lambda_coef,
    leakage_bound,
    restoration_precondition,
    spectral_gap,
    synth_ffn_restore,
    synth_network,
    theory_constants,
)
from pouformer.domain import CubeDomain, ManifoldSpec
from pouformer.softpou import AdmissibilityError, HolderTarget, PouConfig
from pouformer.targets import circle_angle, linear1d, sin1d
from pouformer.transformer import count_params, forward, forward_batch

mpmath.mp.dps = 40


def mp_eta_lambda(M, P):
    th = [2 * mpmath.pi * j / P for j in range(1, P + 1)]
    w = [mpmath.exp(M * mpmath.cos(t)) for t in th]
    s = sum(w)
    return float(w[-1] / s), float(sum(wi * mpmath.cos(t) for wi, t in zip(w, th)) / s)


@pytest.fixture(scope="module")
def small():
    return assemble(linear1d(), PouConfig(0.35))


@pytest.fixture(scope="module")
def sin_con():
    return assemble(sin1d(), PouConfig(0.2))


class TestScalars:
    def test_angles(self):
        np.testing.assert_allclose(angles(4), [np.pi / 2, np.pi, 3 * np.pi / 2, 2 * np.pi])

    @pytest.mark.parametrize("P,c", [(2, 2.0), (4, 1.0), (6, 0.5)])
    def test_spectral_gap(self, P, c):
        assert spectral_gap(P) == pytest.approx(c, rel=1e-15)

    def test_eta_lambda_two_tokens(self):
        assert eta(1.0, 2) == pytest.approx(1 / (1 + math.exp(-2)), rel=1e-15)
        assert eta(1.0, 2) == pytest.approx(0.88080, abs=1e-5)
        assert lambda_coef(1.0, 2) == pytest.approx(math.tanh(1.0), rel=1e-14)
        assert lambda_coef(1.0, 2) == pytest.approx(0.76159, abs=1e-5)

    def test_eta_uniform_at_zero(self):
        assert eta(0.0, 7) == pytest.approx(1 / 7, rel=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 800.0), st.integers(2, 64))
    def test_against_mpmath(self, M, P):
        e, lam = mp_eta_lambda(M, P)
        assert eta(M, P) == pytest.approx(e, rel=1e-12)
        assert lambda_coef(M, P) == pytest.approx(lam, rel=1e-11, abs=1e-15)

    def test_single_token_rejected(self):
        for fn in (spectral_gap, lambda P: eta(1.0, P), lambda P: lambda_coef(1.0, P)):
            with pytest.raises(ConstructionError):
                fn(1)

    def test_attention_scale_closed_form(self):
        # P = 2, B = M_g = d = eps = 1: log(2 * 1 * 7) / 2.
        M = choose_attention_scale(1.0, 2, 1.0, 1.0, 1)
        assert M == pytest.approx(0.5 * math.log(14), rel=1e-15)
        assert M == pytest.approx(1.3195, abs=1e-4)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-3, 0.36), st.integers(2, 200), st.floats(1e-3, 10.0),
           st.floats(0.1, 1e5), st.integers(1, 8))
    def test_leakage_at_chosen_scale_is_half_eps(self, eps, P, B, M_g, d):
        M = choose_attention_scale(eps, P, B, M_g, d)
        assert leakage_bound(P, B, M_g, d, M) == pytest.approx(eps / 2, rel=1e-10)

    def test_attention_scale_rejects_bad_input(self):
        with pytest.raises(ConstructionError):
            choose_attention_scale(0.1, 4, 0.0, 1.0, 1)


class TestRestoration:
    def test_precondition_raises(self):
        with pytest.raises(ConstructionError, match="restoration"):
            synth_ffn_restore(0.1, 8, 1)

    def test_precondition_value(self):
        assert restoration_precondition(3.0, 4) == pytest.approx(5 * math.exp(-3.0), rel=1e-15)

    def test_zeroed_bias_breaks_restoration(self, small):
        p = small.params
        x = np.array([0.3])
        assert check_restoration(forward(p, x)[1])
        d = p.d

        def zero_bias(name, a):
            a = a.copy()
            if name == "blocks.0.b1":
                a[d + 1] = 0.0
            return a

        broken = p.map_tensors(zero_bias)
        assert not check_restoration(forward(broken, x)[1])


class TestAssembly:
    def test_shape(self, sin_con):
        p, m = sin_con.params, sin_con.meta
        assert construction_shape_ok(p, 1, m.P)
        assert m.P == 20
        assert count_params(p) == closed_form_param_count(1, 20) == 1340

    def test_pou_at_half_eps(self, sin_con):
        # Radius (eps/2 / 4)^1 = 0.025 gives 20 cells.
        assert sin_con.pou.info["epsilon"] == pytest.approx(0.1)
        assert sin_con.pou.covering.radius == pytest.approx(0.025)

    def test_impl_bound_is_half_eps(self, sin_con):
        assert implementation_error_bound(sin_con.meta) == pytest.approx(0.1, rel=1e-10)

    def test_network_tracks_pou(self, sin_con):
        X = np.random.default_rng(0).uniform(size=(200, 1))
        gap = np.max(np.abs(forward_batch(sin_con.params, X) - sin_con.pou(X)))
        assert gap <= implementation_error_bound(sin_con.meta)

    def test_trace_identities(self, sin_con):
        m = sin_con.meta
        for x in np.linspace(0, 1, 7):
            _, tr = forward(sin_con.params, np.array([x]), trace_attention=True)
            assert check_preprocessing(tr, [x])
            ai = attention_identities(tr, m.M, m.eta, m.lam)
            assert ai["peak_error"] <= 1e-12
            assert ai["max_leak"] <= math.exp(-m.c * m.M)
            assert ai["pe_rel_error"] <= 1e-10
            assert check_restoration(tr)
            assert readout_recompute_error(tr) <= 1e-12

    def test_manifold_count(self):
        con = assemble(circle_angle(), PouConfig(0.25))
        P = con.meta.P
        assert con.params.d == 2 and construction_shape_ok(con.params, 2, P)
        assert count_params(con.params) == 10 * P * 6 + 9 * 4 + 95 * 2 + 236

    def test_inadmissible(self):
        with pytest.raises(AdmissibilityError, match="epsilon=0.5"):
            assemble(sin1d(), PouConfig(0.5))

    def test_manifold_cap(self):
        spec = ManifoldSpec.circle()
        t = HolderTarget(lambda x: np.zeros(len(x)), 1.0, 0.1, 1.0, spec)
        cap = 16 * 0.1 * (0.5 / 4)
        check_network_accuracy(cap, t)
        with pytest.raises(AdmissibilityError, match="manifold"):
            check_network_accuracy(cap * 1.01, t)

    def test_meta_round_trip(self, sin_con):
        back = ConstructionMeta.from_dict(sin_con.meta.to_dict())
        assert back.to_dict() == sin_con.meta.to_dict()

    def test_synth_from_hand_values(self):
        # Two centers with equal values: the POU is constant, so is the network.
        p = synth_network([[0.25], [0.75]], [0.4, 0.4], M_g=10.0, M=30.0)
        out = forward_batch(p, np.linspace(0, 1, 11)[:, None])
        np.testing.assert_allclose(out, 0.4, rtol=1e-12)


class TestConstants:
    def test_cube_sin1d(self):
        t = sin1d()
        eps, B = 0.2, 1 / (2 * math.pi)
        c = theory_constants(t, eps)
        # d = alpha = C_H = 1
        assert c.C_P == pytest.approx(8.0)
        C_M = 64 / 3 * (math.log(16 * B) + 2)
        assert c.C_M == pytest.approx(C_M, rel=1e-14)
        assert c.C_N == pytest.approx(10 * 5 * 8 + 9 + 95 + 236)
        C_log = abs(math.log(4 * 8 * B * (1 + 6 * C_M))) + 4 + 2
        assert c.C_log == pytest.approx(C_log, rel=1e-14)
        assert c.C_mag == pytest.approx(64 * C_log / 8, rel=1e-14)
        assert c.C_B == pytest.approx(3 * C_M, rel=1e-14)

    def test_first_term_when_eB_small(self, sin_con):
        m = sin_con.meta
        assert math.e * m.sup_bound < 1
        first = 1 / (1 - 2 * m.P * math.exp(-m.c * m.M))
        tilde = max(first, m.constants.C_mag,
                    2 * (1 + 1 / (2 * math.e * m.sup_bound)) * m.constants.C_B)
        assert m.constants.C_mag_tilde == pytest.approx(tilde, rel=1e-14)

    def test_first_term_when_eB_large(self):
        t = HolderTarget(lambda x: np.zeros(len(x)), 1.0, 1.0, 2.0, CubeDomain(1))
        c = theory_constants(t)
        assert c.C_mag_tilde >= 1 / (1 - 1 / (2 * math.e))

    def test_manifold_log_lead(self):
        t = circle_angle()
        c = theory_constants(t, 0.2)
        cm = 3 * math.pi
        C_P = cm * 16 / math.pi
        C_M = (16 / math.pi) ** 2 / 3 * (math.log(4 * 0.5 * C_P) + 2)
        assert c.C_P == pytest.approx(C_P, rel=1e-14)
        assert c.C_M == pytest.approx(C_M, rel=1e-14)
        C_log = abs(math.log(2 * C_P * 0.5 * (1 + 12 * C_M))) + 4 + 2
        assert c.C_log == pytest.approx(C_log, rel=1e-14)

    def test_bounds_hold_for_sin1d(self, sin_con):
        m = sin_con.meta
        assert m.P <= m.count_bound
        assert count_params(sin_con.params) <= m.param_count_bound
        mm = max(float(np.max(np.abs(a))) for _, a in sin_con.params.named_tensors())
        assert mm <= m.magnitude_bound
