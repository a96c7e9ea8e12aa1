"""Closed-form convergence constants and their numeric cross-checks.

The 5x5 contraction matrix M(alpha) bounds the expected error vector
theta_{k+1} <= M theta_k + b; its spectral radius is the authoritative rate
certificate. The closed-form eta values are its Gershgorin row sums and are
reported alongside as diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .smoothing import stationary_covariance


@dataclass(frozen=True)
class TheoryConstants:
    mu: float
    L0: float
    L1: float
    L_phi: float
    L0_hat: float
    n: int
    N: int
    d: int
    rho_A: float
    norm_A_minus_I: float

    def __post_init__(self):
        # mu = 0 and L0_hat = 0 are admitted so degenerate cases can be evaluated
        if min(self.mu, self.L0_hat, self.norm_A_minus_I) < 0:
            raise ValueError("mu, L0_hat and ||A-I|| must be non-negative")
        if min(self.L0, self.L1, self.L_phi) <= 0 or min(self.n, self.N, self.d) < 1:
            raise ValueError("L0, L1, L_phi and the dimensions must be positive")
        if not 0.0 <= self.rho_A < 1.0:
            raise ValueError("rho_A must lie in [0, 1)")

    @classmethod
    def from_problem(cls, problem, report) -> "TheoryConstants":
        c = problem.extras.constants
        if c is None:
            raise ValueError("problem declares no regularity constants")
        return cls(mu=c.mu, L0=c.L0, L1=c.L1, L_phi=c.L_phi, L0_hat=c.L0_hat,
                   n=problem.n, N=problem.n_agents, d=problem.agg_dim,
                   rho_A=report.rho_A, norm_A_minus_I=report.norm_A_minus_I)

    @property
    def L0_hat_limit(self) -> float:
        """(1 - rho_A)/||A - I||; L0_hat must stay below it."""
        return math.inf if self.norm_A_minus_I == 0 else (1.0 - self.rho_A) / self.norm_A_minus_I

    @property
    def L_comb_sq(self) -> float:
        return self.L_phi ** 2 + self.L0_hat ** 2 * (1.0 + self.L_phi) ** 2


def stepsize_bounds(c: TheoryConstants, delta: float):
    """(alpha_max_centralized, alpha1_star, alpha2_star).

    alpha2_star is non-positive exactly when L0_hat >= (1 - rho_A)/||A - I||.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    k = math.sqrt(2 * (c.n + 4)) * c.L1 + 2 * math.sqrt(c.n) / delta
    a_c = 1.0 / (2 * (c.n + 4) * c.L1)
    a1 = (1.0 - c.rho_A) / (c.L_phi * k)
    num = 1.0 - c.rho_A - c.L0_hat * c.norm_A_minus_I
    a2 = math.inf if c.L0_hat == 0 else num / (c.L0_hat * (1.0 + c.L_phi) * k)
    return a_c, a1, a2


def _beta1(alpha, c):
    return alpha * c.mu * (1.0 - 2.0 * alpha * (c.n + 4) * c.L1)


def gammas(alpha: float, delta: float, c: TheoryConstants) -> dict:
    g1 = alpha * math.sqrt(c.n) / delta
    g2 = 0.5 * alpha * delta * c.L1 * (c.n + 6) ** 1.5
    g3 = math.sqrt(2 * (c.n + 4)) * alpha * c.L1
    g4 = c.L0_hat * g3 * (1.0 + c.L_phi)
    g5 = c.L0_hat * c.norm_A_minus_I
    g6 = c.L0_hat * g1 * (1.0 + c.L_phi)
    return {"g1": g1, "g2": g2, "g3": g3, "g4": g4, "g5": g5, "g6": g6}


def assemble_M(alpha: float, delta: float, c: TheoryConstants) -> np.ndarray:
    """The non-negative 5x5 contraction matrix acting on theta."""
    if alpha < 0 or delta <= 0:
        raise ValueError("need alpha >= 0 and delta > 0")
    g = gammas(alpha, delta, c)
    r = c.rho_A
    m11 = math.sqrt(max(1.0 - _beta1(alpha, c), 0.0))
    Lp = c.L_phi
    g1, g3, g4, g5, g6 = g["g1"], g["g3"], g["g4"], g["g5"], g["g6"]
    return np.array([
        [m11, 0.0, 0.0, g1, g1],
        [Lp * g3, r, 0.0, Lp * g1, Lp * g1],
        [Lp * g3, 0.0, r, Lp * g1, Lp * g1],
        [g4, g5, 0.0, r + g6, g6],
        [g4, 0.0, g5, g6, r + g6],
    ])


def spectral_radius(M, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Perron root of a non-negative square matrix by power iteration.

    Iterates on M + I, which has the same Perron vector and no other
    eigenvalue of equal modulus, so periodic (cyclic) patterns still converge.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("M must be square")
    if np.any(M < 0):
        raise ValueError("power iteration here assumes a non-negative matrix")
    S = M + np.eye(M.shape[0])
    v = np.full(M.shape[0], 1.0 / math.sqrt(M.shape[0]))
    lam = 0.0
    for _ in range(max_iter):
        w = S @ v
        lam_new = float(np.linalg.norm(w))
        v = w / lam_new
        if abs(lam_new - lam) <= tol * 1e-3 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    # Rayleigh quotient with the converged vector sharpens the estimate
    lam = float(v @ S @ v) if lam > 0 else lam
    return max(lam - 1.0, 0.0)


def eta_estimates(alpha: float, delta: float, c: TheoryConstants):
    k = math.sqrt(2 * (c.n + 4)) * c.L1 + 2 * math.sqrt(c.n) / delta
    eta1 = math.sqrt(max(1.0 - _beta1(alpha, c), 0.0)) + 2 * alpha * math.sqrt(c.n) / delta
    eta2 = c.rho_A + alpha * c.L_phi * k
    eta3 = c.rho_A + alpha * c.L0_hat * (1.0 + c.L_phi) * k + c.L0_hat * c.norm_A_minus_I
    return eta1, eta2, eta3


def epsilon_bound(alpha: float, delta: float, c: TheoryConstants, E_du_sq: float,
                  squared: bool = True) -> float:
    """Neighbourhood radius; ``E_du_sq`` is E||u_{k+1} - u_k||^2 (2n for i.i.d.).

    ``squared=True`` raises E_du_sq to the second power inside the bracket;
    ``squared=False`` uses it linearly.
    """
    if E_du_sq < 0 or delta < 0:
        raise ValueError("need E_du_sq >= 0 and delta >= 0")
    e = E_du_sq ** 2 if squared else E_du_sq
    Lc = c.L_comb_sq
    inner = (alpha * c.L1 * c.n + 2.0 * Lc * e
             + 0.5 * alpha ** 2 * c.L1 ** 2 * (c.n + 6) ** 3 * (1.0 + 1.5 * Lc))
    return delta * math.sqrt(inner)


def em_trace(B, Sigma_v) -> float:
    """trace[(B - I)^T Sigma (B - I) + Sigma_v] with Sigma the stationary covariance."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Sigma_v, dtype=float))
    S = stationary_covariance(B, Q)
    D = B - np.eye(B.shape[0])
    return float(np.trace(D.T @ S @ D + Q))


def epsilon_order_em(B, Sigma_v, delta: float, n: int) -> float:
    return delta * max(em_trace(B, Sigma_v), math.sqrt(n))


@dataclass
class Certificate:
    alpha: float
    delta: float
    alpha_max_centralized: float
    alpha1_star: float
    alpha2_star: float
    stepsize_ok: bool
    L0_hat_ok: bool
    delta_below_alpha_sqrt_n: bool
    feasible: bool
    eta1_star: float
    eta2_star: float
    eta3_star: float
    eta_numeric: float
    contractive: bool
    epsilon: float
    epsilon_unsquared: float
    epsilon_em: Optional[float] = None

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in asdict(self).items()}


def certify(c: TheoryConstants, alpha: float, delta: float, E_du_sq: Optional[float] = None,
            B=None, Sigma_v=None) -> Certificate:
    """Evaluate every bound for (alpha, delta).

    ``E_du_sq`` defaults to 2n (i.i.d. exploration). With ``B``/``Sigma_v``
    (block-diagonal over agents) the momentum neighbourhood order is added.
    """
    a_c, a1, a2 = stepsize_bounds(c, delta)
    step_ok = alpha < min(a_c, a1) and a2 > 0 and alpha < a2
    l0_ok = c.L0_hat < c.L0_hat_limit
    d_ok = delta < alpha * math.sqrt(c.n)
    e1, e2, e3 = eta_estimates(alpha, delta, c)
    rho = spectral_radius(assemble_M(alpha, delta, c))
    E = 2.0 * c.n if E_du_sq is None else E_du_sq
    eps_em = None
    if B is not None:
        eps_em = epsilon_order_em(B, Sigma_v, delta, c.n)
    return Certificate(
        alpha=alpha, delta=delta, alpha_max_centralized=a_c, alpha1_star=a1, alpha2_star=a2,
        stepsize_ok=step_ok, L0_hat_ok=l0_ok, delta_below_alpha_sqrt_n=d_ok,
        feasible=step_ok and l0_ok and d_ok,
        eta1_star=e1, eta2_star=e2, eta3_star=e3, eta_numeric=rho, contractive=rho < 1.0,
        epsilon=epsilon_bound(alpha, delta, c, E), epsilon_unsquared=epsilon_bound(alpha, delta, c, E, squared=False),
        epsilon_em=eps_em)


def theta_envelope(theta0, eta: float, epsilon: float, k) -> np.ndarray:
    """eta^k ||theta_0|| + (1 - eta^k)/(1 - eta) * epsilon for each k."""
    k = np.asarray(k, dtype=float)
    t0 = float(np.linalg.norm(theta0))
    ek = eta ** k
    return ek * t0 + (1.0 - ek) / (1.0 - eta) * epsilon
