import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argfree.certify import (TheoryConstants, assemble_M, certify, em_trace, epsilon_bound,
                             epsilon_order_em, eta_estimates, spectral_radius, stepsize_bounds,
                             theta_envelope)
from argfree.graph import erdos_renyi, validate
from argfree.problem import random_formation


def consts(**kw):
    base = dict(mu=0.4, L0=10.0, L1=0.6, L_phi=1.0, L0_hat=0.1, n=10, N=5, d=2,
                rho_A=0.5, norm_A_minus_I=1.2)
    base.update(kw)
    return TheoryConstants(**base)


def hand_M(alpha, delta, mu, L1, Lp, L0h, n, rho, nAI):
    """Independent assembly straight from the entry definitions."""
    b1 = alpha * mu * (1 - 2 * alpha * (n + 4) * L1)
    g1 = alpha * math.sqrt(n) / delta
    g3 = math.sqrt(2 * (n + 4)) * alpha * L1
    g4 = L0h * g3 * (1 + Lp)
    g5 = L0h * nAI
    g6 = L0h * g1 * (1 + Lp)
    M = np.zeros((5, 5))
    M[0, 0] = math.sqrt(1 - b1)
    M[0, 3] = M[0, 4] = g1
    for r, c in ((1, 1), (2, 2)):
        M[r, 0] = Lp * g3
        M[r, c] = rho
        M[r, 3] = M[r, 4] = Lp * g1
    for r, c in ((3, 1), (4, 2)):
        M[r, 0] = g4
        M[r, c] = g5
        M[r, 3] = M[r, 4] = g6
        M[r, r] += rho
    return M


class TestConstants:
    def test_from_problem(self):
        p = random_formation(5, 2, 2.0, seed=0)
        rep = validate(erdos_renyi(5, 0.6, 0))
        c = TheoryConstants.from_problem(p, rep)
        assert (c.n, c.N, c.d) == (10, 5, 2)
        assert c.mu == pytest.approx(0.4) and c.rho_A == rep.rho_A

    @pytest.mark.parametrize("kw", [dict(rho_A=1.0), dict(L1=0.0), dict(mu=-0.1), dict(n=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            consts(**kw)


class TestStepsizeBounds:
    def test_centralized(self):
        assert stepsize_bounds(consts(n=1, L1=1.0), 0.1)[0] == pytest.approx(0.1, abs=1e-15)

    def test_alpha1(self):
        c = consts(rho_A=2 / 3, L_phi=1.0, n=2, L1=1.0)
        a1 = stepsize_bounds(c, 0.01)[1]
        assert a1 == pytest.approx((1 / 3) / (math.sqrt(12) + 200 * math.sqrt(2)), rel=1e-14)
        assert a1 == pytest.approx(1.164e-3, abs=5e-7)

    def test_alpha2_sign_flags_infeasible(self):
        c = consts(rho_A=0.5, norm_A_minus_I=1.0, L0_hat=0.6)
        assert stepsize_bounds(c, 1.0)[2] <= 0
        cert = certify(c, 1e-6, 1.0)
        assert not cert.L0_hat_ok and not cert.stepsize_ok and not cert.feasible

    def test_feasible_flags(self):
        # delta < alpha sqrt(n) and alpha < alpha1_star together need L_phi < (1 - rho_A)/2
        c = consts(rho_A=0.2, norm_A_minus_I=1.0, L0_hat=0.1, n=1, L_phi=0.3)
        cert = certify(c, 6e-5, 5e-5)
        assert cert.stepsize_ok and cert.L0_hat_ok and cert.delta_below_alpha_sqrt_n and cert.feasible


class TestMatrix:
    def test_zero_step(self):
        c = consts()
        M = assemble_M(0.0, 1.0, c)
        g5 = c.L0_hat * c.norm_A_minus_I
        expected = np.diag([1.0] + [c.rho_A] * 4)
        expected[3, 1] = expected[4, 2] = g5
        np.testing.assert_array_equal(M, expected)
        assert spectral_radius(M) == pytest.approx(1.0, abs=1e-12)

    def test_matches_hand_assembly(self):
        c = consts()
        args = (1e-3, 0.5)
        ref = hand_M(*args, c.mu, c.L1, c.L_phi, c.L0_hat, c.n, c.rho_A, c.norm_A_minus_I)
        M = assemble_M(*args, c)
        np.testing.assert_allclose(M, ref, rtol=1e-15)
        assert spectral_radius(M) == pytest.approx(max(abs(np.linalg.eigvals(ref))), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 0.05), st.floats(1e-3, 1e3), st.floats(0, 0.9), st.floats(0, 0.3))
    def test_non_negative(self, alpha, delta, rho, L0h):
        assert np.all(assemble_M(alpha, delta, consts(rho_A=rho, L0_hat=L0h)) >= 0)

    def test_row_sums_are_eta(self):
        p = random_formation(5, 2, 2.0, seed=0)
        c = TheoryConstants.from_problem(p, validate(erdos_renyi(5, 0.6, 0)))
        M = assemble_M(2e-3, 1e-5, c)
        e1, e2, e3 = eta_estimates(2e-3, 1e-5, c)
        np.testing.assert_allclose(M.sum(1), [e1, e2, e2, e3, e3], rtol=1e-14)


class TestSpectralRadius:
    def test_identity(self):
        assert spectral_radius(np.eye(5)) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal(self):
        assert spectral_radius(np.diag([0.5, 0.2, 0.1, 0.0, 0.3])) == pytest.approx(0.5, abs=1e-12)

    def test_cyclic_permutation(self):
        assert spectral_radius(np.roll(np.eye(4), 1, axis=1)) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_matches_eigvals(self, n, seed):
        M = np.random.default_rng(seed).uniform(0, 1, (n, n))
        assert spectral_radius(M) == pytest.approx(max(abs(np.linalg.eigvals(M))), rel=1e-10)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            spectral_radius(-np.eye(2))

    def test_feasible_config_contracts(self):
        c = consts(n=3, N=3, d=1, mu=2 / 3, L1=1.0, L0_hat=0.3, rho_A=0.0, norm_A_minus_I=1.0)
        a = 0.9 * min(stepsize_bounds(c, 100.0))
        assert spectral_radius(assemble_M(a, 100.0, c)) < 1


class TestEta:
    def test_zero_step(self):
        c = consts()
        assert eta_estimates(0.0, 1.0, c) == pytest.approx(
            (1.0, c.rho_A, c.rho_A + c.L0_hat * c.norm_A_minus_I), abs=1e-15)

    def test_no_strong_convexity(self):
        c = consts(mu=0.0)
        assert eta_estimates(0.01, 0.5, c)[0] == pytest.approx(1 + 2 * 0.01 * math.sqrt(10) / 0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-6, 1.0), st.floats(1e-2, 1e4), st.floats(0.0, 0.95), st.floats(0.01, 1.0))
    def test_gershgorin_soundness(self, frac, delta, rho, l0frac):
        c0 = consts(rho_A=rho)
        c = consts(rho_A=rho, L0_hat=l0frac * c0.L0_hat_limit * 0.999)
        alpha = frac * min(stepsize_bounds(c, delta))
        etas = eta_estimates(alpha, delta, c)
        r = spectral_radius(assemble_M(alpha, delta, c))
        if max(etas) < 1:
            assert r <= max(etas) + 1e-10

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 0.3), st.floats(0.0, 0.3), st.floats(1e-5, 1e-2), st.floats(0.1, 100))
    def test_monotone_in_L0_hat(self, a, b, alpha, delta):
        lo, hi = sorted((a, b))
        r_lo = spectral_radius(assemble_M(alpha, delta, consts(L0_hat=lo)))
        r_hi = spectral_radius(assemble_M(alpha, delta, consts(L0_hat=hi)))
        assert r_lo <= r_hi + 1e-10


class TestEpsilon:
    def test_zero_delta(self):
        assert epsilon_bound(1e-3, 0.0, consts(), 20.0) == 0.0

    @pytest.mark.parametrize("squared", [True, False])
    def test_linear_in_delta(self, squared):
        c = consts()
        e1 = epsilon_bound(2e-3, 1e-5, c, 20.0, squared)
        for k in (0.5, 2.0, 7.0):
            assert epsilon_bound(2e-3, k * 1e-5, c, 20.0, squared) == pytest.approx(k * e1, rel=1e-15)

    def test_hand_value(self):
        c = consts(n=1, L1=1.0, L_phi=1.0, L0_hat=0.5)
        Lc = 1 + 0.25 * 4  # L_phi^2 + L0_hat^2 (1 + L_phi)^2 = 2
        inner_sq = 0.01 * 1 + 2 * Lc * 4.0 + 0.5 * 1e-4 * 343 * (1 + 1.5 * Lc)
        inner_lin = 0.01 * 1 + 2 * Lc * 2.0 + 0.5 * 1e-4 * 343 * (1 + 1.5 * Lc)
        assert epsilon_bound(0.01, 0.1, c, 2.0) == pytest.approx(0.1 * math.sqrt(inner_sq), rel=1e-14)
        assert epsilon_bound(0.01, 0.1, c, 2.0, squared=False) == pytest.approx(
            0.1 * math.sqrt(inner_lin), rel=1e-14)

    def test_example_increment_second_moment(self):
        # (kappa-1)^2 n s^2/(1-kappa^2) + n s^2 with kappa=0.5, s^2=1, n=1
        assert em_trace([[0.5]], [[1.0]]) == pytest.approx(4 / 3, rel=1e-14)

    def test_em_order_scalar(self):
        assert epsilon_order_em([[0.5]], [[1.0]], 1.0, 1) == pytest.approx(4 / 3, rel=1e-14)

    @pytest.mark.parametrize("kappa, s2, n, delta", [(0.95, 0.0975, 10, 1e-5), (0.2, 0.01, 4, 0.3)])
    def test_em_order_closed_form(self, kappa, s2, n, delta):
        expected = delta * max((kappa - 1) ** 2 * n * s2 / (1 - kappa ** 2) + n * s2, math.sqrt(n))
        assert epsilon_order_em(kappa * np.eye(n), s2 * np.eye(n), delta, n) == pytest.approx(
            expected, rel=1e-12)

    def test_em_trace_tends_to_innovation(self):
        Q = np.diag([0.3, 0.7])
        for eps in (1e-2, 1e-3, 1e-4):
            t = em_trace((1 - eps) * np.eye(2), Q)
            assert abs(t - np.trace(Q)) <= 2 * eps * np.trace(Q)

    def test_negative_moment_rejected(self):
        with pytest.raises(ValueError):
            epsilon_bound(1e-3, 1.0, consts(), -1.0)


class TestCertificate:
    def test_json_serialisable(self):
        import json
        cert = certify(consts(L0_hat=0.0), 1e-3, 0.5, B=0.5 * np.eye(10), Sigma_v=np.eye(10))
        doc = json.loads(json.dumps(cert.to_json()))
        assert doc["alpha2_star"] is None  # infinite when L0_hat = 0
        assert doc["epsilon_em"] == pytest.approx(0.5 * em_trace(0.5 * np.eye(10), np.eye(10)))

    def test_both_epsilon_forms(self):
        cert = certify(consts(), 1e-3, 0.5)
        assert cert.epsilon_unsquared < cert.epsilon
        assert cert.eta_numeric <= max(cert.eta1_star, cert.eta2_star, cert.eta3_star) + 1e-10

    def test_envelope(self):
        env = theta_envelope([3.0, 4.0], 0.5, 1.0, [0, 1, 2])
        np.testing.assert_allclose(env, [5.0, 3.5, 2.75])
