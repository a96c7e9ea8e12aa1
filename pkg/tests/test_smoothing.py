import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argfree.smoothing import (ExplorationProcess, contraction_constants, empirical_moment,
                               exploration_step, forward_difference_oracle,
                               gaussian_smoothed_value, moment_bound, oracle_second_moment_bounds,
                               random_momentum_matrix, smoothing_gap_bound, stationary_covariance)


class TestForwardDifference:
    def test_hand_value(self):
        g = forward_difference_oracle(lambda x: 0.5 * x[0] ** 2, np.array([1.0]), np.array([1.0]), 0.1)
        assert g[0] == pytest.approx(1.05, abs=1e-12)

    def test_zero_direction(self):
        g = forward_difference_oracle(lambda x: np.sum(x ** 3), np.ones(3), np.zeros(3), 0.5)
        np.testing.assert_array_equal(g, np.zeros(3))

    @pytest.mark.parametrize("delta", [1e-3, 0.1, 10.0])
    def test_linear_is_delta_free(self, delta):
        c = np.array([1.0, -2.0, 0.5])
        u = np.array([0.3, 0.1, -1.0])
        w = np.array([2.0, 0.0, 1.0])
        g = forward_difference_oracle(lambda x: c @ x, np.ones(3), u, delta, sigma_inv_u=w)
        np.testing.assert_allclose(g, (c @ u) * w, rtol=1e-10)

    def test_exactly_two_evaluations(self):
        calls = []
        forward_difference_oracle(lambda x: calls.append(1) or 0.0, np.zeros(2), np.ones(2), 1.0)
        assert len(calls) == 2

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            forward_difference_oracle(lambda x: np.inf, np.zeros(1), np.ones(1), 1.0)

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            forward_difference_oracle(lambda x: 0.0, np.zeros(1), np.ones(1), 0.0)


class TestSmoothedValue:
    def test_constant(self):
        assert gaussian_smoothed_value(lambda x: 3.5, np.zeros(2), 2.0, 100, seed=0) == 3.5

    def test_square_adds_unit_variance(self):
        m, se = gaussian_smoothed_value(lambda x: x[0] ** 2, np.array([1.5]), 1.0, 100_000,
                                        seed=1, return_stderr=True)
        assert abs(m - (1.5 ** 2 + 1)) <= 3 * se

    def test_convex_upper_bound(self):
        f = lambda x: np.sum(np.abs(x)) + x @ x  # noqa: E731
        x = np.array([0.2, -1.0])
        m, se = gaussian_smoothed_value(f, x, 0.3, 20_000, seed=2, return_stderr=True)
        assert m + 4 * se >= f(x)

    def test_bad_sample_count(self):
        with pytest.raises(ValueError):
            gaussian_smoothed_value(lambda x: 0.0, np.zeros(1), 1.0, 0, seed=0)


class TestMoments:
    def test_zero(self):
        assert moment_bound(0, 7) == 1.0

    def test_second(self):
        assert moment_bound(2, 5) == 5.0

    def test_fourth(self):
        assert moment_bound(4, 3) == 49.0

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_empirical_below_bound(self, p, n):
        assert empirical_moment(p, n, 50_000, seed=p * 10 + n) <= moment_bound(p, n) * 1.02

    def test_second_moment_equals_dimension(self):
        assert empirical_moment(2, 4, 200_000, seed=0) == pytest.approx(4.0, rel=0.02)


class TestSmoothingBounds:
    def test_gap_hand_value(self):
        # 0.5 * 0.1^2 * 2 * 3
        assert smoothing_gap_bound(0.1, 2.0, 3) == pytest.approx(0.03)

    def test_second_moment_hand_values(self):
        # 0.5*0.01*7^3*4 + 2*5*9 and 4*5*9 + 3*0.01*4*5^3
        b_f, b_fd = oracle_second_moment_bounds(0.1, 2.0, 1, 3.0, 3.0)
        assert b_f == pytest.approx(96.86)
        assert b_fd == pytest.approx(195.0)

    def test_quadratic_gap_within_bound(self):
        H = np.diag([1.0, 3.0])
        delta = 0.5
        exact_gap = 0.5 * delta ** 2 * np.trace(H)
        assert 0.0 <= exact_gap <= smoothing_gap_bound(delta, 3.0, 2)


class TestContractionConstants:
    def test_hand_value(self):
        c = contraction_constants(0.01, 0.1, 1.0, 1.0, 1)
        assert c.beta1 == pytest.approx(0.009, abs=1e-15)
        assert c.beta2 == pytest.approx(np.sqrt(2.715e-4), rel=1e-12)
        assert c.beta2 == pytest.approx(0.016477, abs=1e-6)
        assert c.valid

    def test_zero_step(self):
        c = contraction_constants(0.0, 0.1, 1.0, 1.0, 3)
        assert c.beta1 == 0.0 and c.beta2 == 0.0

    def test_step_too_large(self):
        n, L1 = 2, 1.0
        c = contraction_constants(1 / (2 * (n + 4) * L1), 0.1, 0.5, L1, n)
        assert c.beta1 <= 0 and not c.valid

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            contraction_constants(0.01, 0.0, 1.0, 1.0, 1)


class TestStationaryCovariance:
    def test_scalar(self):
        np.testing.assert_allclose(stationary_covariance([[0.5]], [[1.0]]), [[4 / 3]], rtol=1e-12)

    def test_zero_memory(self):
        Q = np.array([[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_allclose(stationary_covariance(np.zeros((2, 2)), Q), Q)

    @pytest.mark.parametrize("kappa, s2, n", [(0.5, 1.0, 1), (0.95, 0.16, 3), (0.2, 2.0, 2)])
    def test_scaled_identity_closed_form(self, kappa, s2, n):
        S = stationary_covariance(kappa * np.eye(n), s2 * np.eye(n))
        np.testing.assert_allclose(S, s2 / (1 - kappa ** 2) * np.eye(n), rtol=1e-12)

    def test_rejects_unstable(self):
        with pytest.raises(ValueError):
            stationary_covariance([[1.0]], [[1.0]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10_000))
    def test_lyapunov_residual(self, n, seed):
        rng = np.random.default_rng(seed)
        B = random_momentum_matrix(n, rng, (0.0, 0.97))
        C = rng.standard_normal((n, n))
        Q = C @ C.T + 0.1 * np.eye(n)
        S = stationary_covariance(B, Q)
        assert np.linalg.norm(B @ S @ B.T + Q - S) <= 1e-10 * np.linalg.norm(S)
        np.testing.assert_allclose(S, S.T, atol=0)


class TestRandomMomentum:
    def test_spectrum_in_range(self):
        rng = np.random.default_rng(0)
        for n in (1, 2, 5):
            B = random_momentum_matrix(n, rng)
            ev = np.linalg.eigvalsh(B)
            np.testing.assert_allclose(B, B.T, atol=1e-14)
            assert np.all((ev > 0.9 - 1e-12) & (ev < 1.0))


class TestExplorationProcess:
    def test_iid_identity_covariance(self):
        proc = ExplorationProcess([2, 3], seed=0)
        for _ in range(3):
            u, cov = exploration_step(proc)
            assert [x.shape for x in u] == [(2,), (3,)]
            for C, k in zip(cov, (2, 3)):
                np.testing.assert_array_equal(C, np.eye(k))
        np.testing.assert_array_equal(proc.whitened(0), proc.u[0])

    def test_iid_deterministic(self):
        a = ExplorationProcess([2, 2], seed=9)
        b = ExplorationProcess([2, 2], seed=9)
        for _ in range(600):  # crosses a block boundary
            np.testing.assert_array_equal(np.concatenate(a.step()[0]), np.concatenate(b.step()[0]))

    def test_streams_follow_ids(self):
        a = ExplorationProcess([1, 1], seed=4)
        b = ExplorationProcess([1, 1], seed=4, stream_ids=[1, 0])
        assert a.u[0][0] == b.u[1][0] and a.u[1][0] == b.u[0][0]

    def test_zero_memory_reduces_to_innovation(self):
        Sv = np.array([[0.5, 0.1], [0.1, 0.3]])
        proc = ExplorationProcess([2], seed=0, mode="momentum", B=[np.zeros((2, 2))],
                                  Sigma_v=[Sv], Sigma_u0=[np.eye(2)])
        _, cov = proc.step()
        np.testing.assert_allclose(cov[0], Sv)

    def test_scalar_covariance_recursion(self):
        proc = ExplorationProcess([1], seed=0, mode="momentum", B=[[[0.5]]],
                                  Sigma_v=[[[1.0]]], Sigma_u0=[[[1.0]]])
        _, cov = proc.step()
        assert cov[0][0, 0] == pytest.approx(1.25, abs=1e-15)

    def test_momentum_recursion_of_sample(self):
        B = np.array([[0.6, 0.1], [0.0, 0.5]])
        proc = ExplorationProcess([2], seed=3, mode="momentum", B=[B], Sigma_v=[np.zeros((2, 2)) + 1e-3 * np.eye(2)],
                                  Sigma_u0=[np.eye(2)])
        u0 = proc.u[0].copy()
        u1 = proc.step()[0][0]
        assert np.linalg.norm(u1 - B @ u0) < 0.2

    def test_whitened_solves(self):
        C = np.array([[2.0, 0.5], [0.5, 1.0]])
        proc = ExplorationProcess([2], seed=1, mode="momentum", B=[0.5 * np.eye(2)],
                                  Sigma_v=[np.eye(2)], Sigma_u0=[C])
        np.testing.assert_allclose(C @ proc.whitened(0), proc.u[0], atol=1e-12)

    def test_rejects_unstable_momentum(self):
        with pytest.raises(ValueError):
            ExplorationProcess([1], seed=0, mode="momentum", B=[[[1.0]]], Sigma_v=[[[1.0]]])

    def test_loss_of_definiteness(self):
        with pytest.raises(FloatingPointError):
            proc = ExplorationProcess([1], seed=0, mode="momentum", B=[[[0.1]]],
                                      Sigma_v=[[[0.0]]], Sigma_u0=[[[1e-6]]])
            for _ in range(10):
                proc.step()

    def test_iid_increment_second_moment(self):
        proc = ExplorationProcess([3], seed=5)
        prev = proc.u[0]
        d = []
        for _ in range(30_000):
            cur = proc.step()[0][0]
            d.append(np.sum((cur - prev) ** 2))
            prev = cur
        d = np.array(d)
        # consecutive increments overlap, so use a generous standard-error estimate
        assert abs(d.mean() - 6.0) <= 3 * d.std() * np.sqrt(2 / len(d))

    def test_empirical_stationary_covariance(self):
        rng = np.random.default_rng(0)
        B = random_momentum_matrix(3, rng, (0.3, 0.8))
        Q = np.diag([0.5, 1.0, 0.2])
        proc = ExplorationProcess([3], seed=11, mode="momentum", B=[B], Sigma_v=[Q],
                                  Sigma_u0=[np.eye(3)])
        for _ in range(2_000):
            proc.step()
        U = np.array([proc.step()[0][0] for _ in range(40_000)])
        S = stationary_covariance(B, Q)
        assert np.linalg.norm(U.T @ U / len(U) - S) <= 0.05 * np.linalg.norm(S)
        np.testing.assert_allclose(proc.cov[0], S, rtol=1e-9)
