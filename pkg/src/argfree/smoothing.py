"""Gaussian smoothing machinery and exploration processes.

Covers the forward-difference oracle, Monte Carlo smoothed values, Gaussian
moment bounds, the centralized contraction constants, and the i.i.d. /
momentum-filtered exploration signals with their covariance recursion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_BLOCK = 512


def forward_difference_oracle(f_eval: Callable[[np.ndarray], float], x, u, delta: float,
                              sigma_inv_u=None) -> np.ndarray:
    """((f(x + delta u) - f(x)) / delta) * Sigma^{-1} u.

    ``sigma_inv_u`` defaults to ``u`` (identity covariance). Exactly two
    evaluations of ``f_eval`` are made.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = u if sigma_inv_u is None else np.asarray(sigma_inv_u, dtype=float)
    f1 = float(f_eval(x + delta * u))
    f0 = float(f_eval(x))
    if not (np.isfinite(f1) and np.isfinite(f0)):
        raise FloatingPointError(f"non-finite function value ({f0}, {f1})")
    return ((f1 - f0) / delta) * w


def gaussian_smoothed_value(f_eval, x, delta: float, n_samples: int, seed: int,
                            return_stderr: bool = False):
    """Monte Carlo estimate of f_delta(x) = E[f(x + delta u)], u ~ N(0, I)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=float)
    U = np.random.default_rng(seed).standard_normal((n_samples, x.size))
    vals = np.array([f_eval(x + delta * u) for u in U], dtype=float)
    mean = float(vals.mean())
    if return_stderr:
        se = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else np.inf
        return mean, se
    return mean


def moment_bound(p: int, n: int) -> float:
    """Upper bound on E||u||^p for u ~ N(0, I_n)."""
    if p < 0 or n < 1:
        raise ValueError("need p >= 0 and n >= 1")
    if p <= 2:
        return float(n) ** (p / 2)
    return float(p + n) ** (p / 2)


def empirical_moment(p: int, n: int, n_samples: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo E||u||^p, for comparing against :func:`moment_bound`."""
    U = np.random.default_rng(seed).standard_normal((n_samples, n))
    return float(np.mean(np.linalg.norm(U, axis=1) ** p))


def smoothing_gap_bound(delta: float, L1: float, n: int) -> float:
    """Upper bound on |f_delta(x) - f(x)| for L1-smooth f."""
    return 0.5 * delta ** 2 * L1 * n


def oracle_second_moment_bounds(delta: float, L1: float, n: int, grad_norm: float,
                                smoothed_grad_norm: float):
    """Two upper bounds on E||g_delta(x)||^2 with identity covariance.

    The first is in terms of ||grad f(x)||, the second in terms of
    ||grad f_delta(x)||.
    """
    b_f = 0.5 * delta ** 2 * (n + 6) ** 3 * L1 ** 2 + 2 * (n + 4) * grad_norm ** 2
    b_fd = 4 * (n + 4) * smoothed_grad_norm ** 2 + 3 * delta ** 2 * L1 ** 2 * (n + 4) ** 3
    return b_f, b_fd


@dataclass(frozen=True)
class ContractionConstants:
    beta1: float
    beta2: float

    @property
    def valid(self) -> bool:
        return 0.0 < self.beta1 < 1.0


def contraction_constants(alpha, delta, mu, L1, n) -> ContractionConstants:
    """Rate and radius of ``x - alpha g_delta(x)`` towards x* (strongly convex f)."""
    if min(delta, mu, L1, n) <= 0 or alpha < 0:
        raise ValueError("contraction constants need positive inputs")
    b1 = alpha * mu * (1.0 - 2.0 * alpha * (n + 4) * L1)
    b2 = np.sqrt(alpha * delta ** 2 * L1 * (n + 0.5 * alpha * (n + 6) ** 3 * L1))
    return ContractionConstants(float(b1), float(b2))


def spectral_radius_dense(B) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(B))))) if np.size(B) else 0.0


def stationary_covariance(B, Sigma_v, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of Sigma = B Sigma B^T + Sigma_v, by iterating the recursion.

    Uses the doubling form S <- S + A S A^T, A <- A^2, which reaches the same
    limit as the plain recursion in logarithmically many steps.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Sigma_v, dtype=float))
    if B.shape[0] != B.shape[1] or Q.shape != B.shape:
        raise ValueError("B and Sigma_v must be square and of equal size")
    if spectral_radius_dense(B) >= 1.0:
        raise ValueError("stationary covariance needs spectral radius of B < 1")
    S = Q.copy()
    A = B.copy()
    eps = np.finfo(float).eps
    for _ in range(max_iter):
        inc = A @ S @ A.T
        S = S + inc
        A = A @ A
        # doubling converges quadratically: once the residual is below tol, keep
        # going until the increment no longer changes S at working precision
        if (np.linalg.norm(inc) <= eps * np.linalg.norm(S)
                and np.linalg.norm(B @ S @ B.T + Q - S) <= tol * max(1.0, np.linalg.norm(S))):
            break
    return 0.5 * (S + S.T)


def _sqrt_psd(C: np.ndarray) -> np.ndarray:
    lam, Q = np.linalg.eigh(C)
    if lam.min() < -1e-12 * max(1.0, abs(lam).max()):
        raise ValueError("covariance must be positive semidefinite")
    return Q * np.sqrt(np.clip(lam, 0.0, None))


def random_momentum_matrix(n: int, rng: np.random.Generator, eig_range=(0.9, 1.0)) -> np.ndarray:
    """Q diag(d) Q^T with Haar-random orthogonal Q and d uniform in ``eig_range``."""
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    Q = Q * np.sign(np.diag(R))
    d = rng.uniform(eig_range[0], eig_range[1], size=n)
    return (Q * d) @ Q.T


class ExplorationProcess:
    """Per-agent exploration signals u_i^k.

    ``mode="iid"``: u_i^k ~ N(0, I) independently, covariance I throughout.
    ``mode="momentum"``: u_i^{k+1} = B_i u_i^k + v_i^{k+1}, v ~ N(0, Sigma_v,i),
    with the covariance propagated exactly by Sigma <- B Sigma B^T + Sigma_v.

    Every agent owns an RNG stream keyed by ``(seed, stream_id)``; normals are
    drawn in fixed-size blocks so the sequence depends on nothing but the seed.
    """

    def __init__(self, local_dims: Sequence[int], seed: int, mode: str = "iid",
                 B: Optional[Sequence] = None, Sigma_v: Optional[Sequence] = None,
                 Sigma_u0: Optional[Sequence] = None, stream_ids: Optional[Sequence[int]] = None):
        if mode not in ("iid", "momentum"):
            raise ValueError(f"unknown exploration mode {mode!r}")
        self.mode = mode
        self.local_dims = tuple(local_dims)
        N = len(self.local_dims)
        ids = list(range(N)) if stream_ids is None else list(stream_ids)
        self._rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, int(s))))
                      for s in ids]
        self._buf = [np.empty((0, k)) for k in self.local_dims]
        self._pos = [0] * N
        if mode == "momentum":
            if B is None or Sigma_v is None:
                raise ValueError("momentum mode needs B and Sigma_v")
            self.B = [np.atleast_2d(np.asarray(b, dtype=float)) for b in B]
            self.Sigma_v = [np.atleast_2d(np.asarray(s, dtype=float)) for s in Sigma_v]
            for b, s, k in zip(self.B, self.Sigma_v, self.local_dims):
                if b.shape != (k, k) or s.shape != (k, k):
                    raise ValueError("B_i and Sigma_v,i must be n_i x n_i")
                if spectral_radius_dense(b) >= 1.0:
                    raise ValueError("momentum matrices need spectral radius < 1")
            self._Lv = [_sqrt_psd(s) for s in self.Sigma_v]
        else:
            self.B = None
            self.Sigma_v = None
        if Sigma_u0 is None or mode == "iid":
            self.cov = [np.eye(k) for k in self.local_dims]
        else:
            self.cov = [np.atleast_2d(np.asarray(s, dtype=float)).copy() for s in Sigma_u0]
        self._check_cov()
        self.u = [self._normal(i, _sqrt_psd(self.cov[i])) for i in range(N)]

    def _normal(self, i, L=None) -> np.ndarray:
        if self._pos[i] >= len(self._buf[i]):
            self._buf[i] = self._rngs[i].standard_normal((_BLOCK, self.local_dims[i]))
            self._pos[i] = 0
        z = self._buf[i][self._pos[i]]
        self._pos[i] += 1
        return z.copy() if L is None else L @ z

    def _check_cov(self):
        for C in self.cov:
            try:
                np.linalg.cholesky(C - 1e-12 * np.eye(C.shape[0]))
            except np.linalg.LinAlgError:
                raise FloatingPointError("exploration covariance lost positive definiteness") from None

    def step(self):
        """Advance every agent one step; returns (u, cov) lists."""
        N = len(self.local_dims)
        if self.mode == "iid":
            self.u = [self._normal(i) for i in range(N)]
        else:
            self.u = [self.B[i] @ self.u[i] + self._normal(i, self._Lv[i]) for i in range(N)]
            self.cov = [self.B[i] @ self.cov[i] @ self.B[i].T + self.Sigma_v[i] for i in range(N)]
            self._check_cov()
        return self.u, self.cov

    def whitened(self, i: int) -> np.ndarray:
        """(Sigma_u,i)^{-1} u_i."""
        if self.mode == "iid":
            return self.u[i]
        return np.linalg.solve(self.cov[i], self.u[i])


def exploration_step(proc: ExplorationProcess):
    return proc.step()
