"""Aggregative cooperative problems behind an oracle-only interface.

Agents see their local loss ``f_i(x_i, sigma)`` and aggregation map
``phi_i(x_i)`` only through counted oracle calls. Gradients, the optimizer
and regularity constants live in :class:`AnalyticExtras`, which the
gradient-free solvers never touch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

LossOracle = Callable[[int, np.ndarray, np.ndarray], float]
AggOracle = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class OracleCounters:
    loss_evals: np.ndarray
    agg_evals: np.ndarray
    gradient_evals: np.ndarray

    @classmethod
    def zeros(cls, n_agents: int) -> "OracleCounters":
        z = lambda: np.zeros(n_agents, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z())

    def copy(self) -> "OracleCounters":
        return OracleCounters(self.loss_evals.copy(), self.agg_evals.copy(),
                              self.gradient_evals.copy())


@dataclass(frozen=True)
class ProblemConstants:
    """Regularity constants: mu, L0, L1 of f; L_phi of the phi_i; L0_hat of the f_i."""

    mu: float
    L0: float
    L1: float
    L_phi: float
    L0_hat: float


@dataclass
class AnalyticExtras:
    """Benchmark-only knowledge: gradients, optimizer, constants.

    ``jac_phi(i, x_i)`` returns the d x n_i Jacobian of phi_i.
    """

    grad_x: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None
    grad_sigma: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None
    jac_phi: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    x_star: Optional[np.ndarray] = None
    constants: Optional[ProblemConstants] = None

    @property
    def has_gradients(self) -> bool:
        return None not in (self.grad_x, self.grad_sigma, self.jac_phi)


class AggregativeProblem:
    """Problem ``min_x (1/N) sum_i f_i(x_i, sigma_f(x))`` with
    ``sigma_f(x) = (1/N) sum_i phi_i(x_i)``.

    Parameters
    ----------
    local_dims : sequence of int
        Block sizes n_i of the decision vector.
    agg_dim : int
        Dimension d of the aggregative variable.
    local_loss, agg_map : callables
        Per-agent oracles ``(i, x_i, sigma) -> float`` and ``(i, x_i) -> R^d``.
    extras : AnalyticExtras, optional
    """

    def __init__(self, local_dims: Sequence[int], agg_dim: int,
                 local_loss: LossOracle, agg_map: AggOracle,
                 extras: Optional[AnalyticExtras] = None, name: str = "custom"):
        self.local_dims = tuple(int(k) for k in local_dims)
        if not self.local_dims or min(self.local_dims) < 1:
            raise ValueError("local_dims must be positive")
        self.agg_dim = int(agg_dim)
        self._loss = local_loss
        self._agg = agg_map
        self.extras = extras or AnalyticExtras()
        self.name = name
        self.offsets = np.concatenate([[0], np.cumsum(self.local_dims)])
        self.counters = OracleCounters.zeros(self.n_agents)
        self._counting = True

    @property
    def n_agents(self) -> int:
        return len(self.local_dims)

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    def block(self, x: np.ndarray, i: int) -> np.ndarray:
        return x[self.offsets[i]:self.offsets[i + 1]]

    def split(self, x) -> list:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"expected decision vector of length {self.n}, got {x.shape}")
        return [self.block(x, i) for i in range(self.n_agents)]

    # -- counted oracles -----------------------------------------------
    def loss(self, i: int, x_i, sigma) -> float:
        if self._counting:
            self.counters.loss_evals[i] += 1
        return float(self._loss(i, np.asarray(x_i, dtype=float), np.asarray(sigma, dtype=float)))

    def agg(self, i: int, x_i) -> np.ndarray:
        if self._counting:
            self.counters.agg_evals[i] += 1
        out = np.asarray(self._agg(i, np.asarray(x_i, dtype=float)), dtype=float).reshape(-1)
        if out.shape != (self.agg_dim,):
            raise ValueError(f"phi_{i} returned shape {out.shape}, expected ({self.agg_dim},)")
        return out

    def _need_grads(self):
        if not self.extras.has_gradients:
            raise ValueError(f"problem '{self.name}' has no analytic gradients")

    def grad_x(self, i, x_i, sigma) -> np.ndarray:
        self._need_grads()
        if self._counting:
            self.counters.gradient_evals[i] += 1
        return np.asarray(self.extras.grad_x(i, np.asarray(x_i, float), np.asarray(sigma, float)), float)

    def grad_sigma(self, i, x_i, sigma) -> np.ndarray:
        self._need_grads()
        if self._counting:
            self.counters.gradient_evals[i] += 1
        return np.asarray(self.extras.grad_sigma(i, np.asarray(x_i, float), np.asarray(sigma, float)), float)

    def jac_phi(self, i, x_i) -> np.ndarray:
        self._need_grads()
        if self._counting:
            self.counters.gradient_evals[i] += 1
        return np.asarray(self.extras.jac_phi(i, np.asarray(x_i, float)), float).reshape(self.agg_dim, -1)

    # -- bookkeeping ----------------------------------------------------
    def reset_counts(self) -> None:
        self.counters = OracleCounters.zeros(self.n_agents)

    def uncounted(self):
        """Context manager suspending the counters (diagnostics only)."""
        return _Uncounted(self)

    @property
    def clean(self) -> "AggregativeProblem":
        """The noiseless problem underneath any measurement-noise wrapper."""
        return self

    def measure(self, i: int, x_i) -> np.ndarray:
        """Agent i's reading of its own position (exact unless wrapped)."""
        return np.asarray(x_i, dtype=float)

    def full_gradient(self, x) -> np.ndarray:
        """Analytic gradient of f (diagnostics; never counted)."""
        self._need_grads()
        xs = self.split(x)
        N = self.n_agents
        sig = sum(np.asarray(self._agg(i, xs[i]), float) for i in range(N)) / N
        gs = sum(np.asarray(self.extras.grad_sigma(i, xs[i], sig), float) for i in range(N)) / N
        parts = []
        for i in range(N):
            J = np.asarray(self.extras.jac_phi(i, xs[i]), float).reshape(self.agg_dim, -1)
            parts.append((np.asarray(self.extras.grad_x(i, xs[i], sig), float) + J.T @ gs) / N)
        return np.concatenate(parts)


class _Uncounted:
    def __init__(self, p):
        self.p = p

    def __enter__(self):
        self.prev = self.p._counting
        self.p._counting = False
        return self.p

    def __exit__(self, *exc):
        self.p._counting = self.prev
        return False


def aggregate(p: AggregativeProblem, x) -> np.ndarray:
    """sigma_f(x) = (1/N) sum_i phi_i(x_i)."""
    xs = p.split(x)
    return sum(p.agg(i, xs[i]) for i in range(p.n_agents)) / p.n_agents


def global_loss(p: AggregativeProblem, x) -> float:
    """f(x) = (1/N) sum_i f_i(x_i, sigma_f(x))."""
    xs = p.split(x)
    sig = aggregate(p, x)
    return sum(p.loss(i, xs[i], sig) for i in range(p.n_agents)) / p.n_agents


def oracle_counts(p: AggregativeProblem) -> OracleCounters:
    return p.counters.copy()


# ---------------------------------------------------------------------------
# Formation-control benchmark
# ---------------------------------------------------------------------------

def formation_hessian(gammas, dim: int) -> np.ndarray:
    """Hessian of the formation objective: (1/N)(diag(gamma) + I - J) kron I_dim."""
    g = np.asarray(gammas, dtype=float)
    N = g.size
    H = (np.diag(g) + np.eye(N) - np.full((N, N), 1.0 / N)) / N
    return np.kron(H, np.eye(dim))


def formation_problem(targets, gammas, domain=(0.0, 10.0)) -> AggregativeProblem:
    """Robots pulled to private targets while staying near the barycenter.

    ``f_i(x_i, sigma) = gamma_i/2 ||x_i - r_i||^2 + 1/2 ||x_i - sigma||^2``
    with ``phi_i`` the identity. The Lipschitz constants L0 and L0_hat are
    bounds over the box ``domain`` (per coordinate) and only hold there.
    """
    R = np.atleast_2d(np.asarray(targets, dtype=float))
    N, dim = R.shape
    g = np.broadcast_to(np.asarray(gammas, dtype=float), (N,)).copy()
    if np.any(g <= 0):
        raise ValueError("gammas must be positive")

    def loss(i, xi, sig):
        dr = xi - R[i]
        ds = xi - sig
        return 0.5 * g[i] * (dr @ dr) + 0.5 * (ds @ ds)

    def grad_x(i, xi, sig):
        return g[i] * (xi - R[i]) + (xi - sig)

    def grad_sigma(i, xi, sig):
        return -(xi - sig)

    eye = np.eye(dim)
    H = formation_hessian(g, dim)
    # stationarity: H x = (1/N) (gamma kron 1) * r
    x_star = np.linalg.solve(H, (g[:, None] * R).ravel() / N)
    ev = np.linalg.eigvalsh(H)
    lo, hi = domain
    width = hi - lo
    diam_local = width * np.sqrt(dim)
    L0_hat = float(np.max(np.sqrt((g + 1.0) ** 2 + 1.0)) * diam_local)
    constants = ProblemConstants(
        mu=float(ev[0]), L1=float(ev[-1]), L_phi=1.0,
        L0=float(ev[-1] * width * np.sqrt(N * dim)), L0_hat=L0_hat)
    extras = AnalyticExtras(grad_x=grad_x, grad_sigma=grad_sigma,
                            jac_phi=lambda i, xi: eye, x_star=x_star,
                            constants=constants)
    p = AggregativeProblem([dim] * N, dim, loss, lambda i, xi: xi.copy(),
                           extras=extras, name="formation")
    p.targets = R
    p.gammas = g
    p.domain = (float(lo), float(hi))
    return p


def random_formation(n_agents: int, dim: int = 2, gamma: float = 2.0, seed: int = 0,
                     box=(0.0, 10.0)) -> AggregativeProblem:
    rng = np.random.default_rng(seed)
    targets = rng.uniform(box[0], box[1], size=(n_agents, dim))
    return formation_problem(targets, np.full(n_agents, gamma), domain=box)


def save_benchmark(p: AggregativeProblem, path, seed=None) -> None:
    doc = {"targets": p.targets.tolist(), "gammas": p.gammas.tolist(), "seed": seed}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_benchmark(path) -> AggregativeProblem:
    doc = json.loads(Path(path).read_text())
    return formation_problem(doc["targets"], doc["gammas"])


# ---------------------------------------------------------------------------
# Measurement noise
# ---------------------------------------------------------------------------

class NoisyProblem(AggregativeProblem):
    """Oracles evaluated at perturbed positions ``x_i + w_i``, w_i ~ N(0, C_i).

    ``mode="per_call"`` draws a fresh ``w_i`` on every oracle query.
    ``mode="per_round"`` perturbs nothing inside the oracles; instead
    :meth:`measure` returns one noisy reading of ``x_i`` that the solver uses
    for all of agent i's queries in a round.
    """

    def __init__(self, base: AggregativeProblem, noise_cov, seed: int, mode: str = "per_call"):
        if mode not in ("per_call", "per_round"):
            raise ValueError(f"unknown noise mode {mode!r}")
        self.base = base
        self.mode = mode
        covs = _per_agent_covs(noise_cov, base.local_dims)
        self._factors = []
        for C in covs:
            lam, Q = np.linalg.eigh(C)
            if lam.min() < -1e-12 * max(1.0, abs(lam).max()):
                raise ValueError("noise covariance must be positive semidefinite")
            self._factors.append(Q * np.sqrt(np.clip(lam, 0.0, None)))
        self._rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, i)))
                      for i in range(base.n_agents)]
        super().__init__(base.local_dims, base.agg_dim, base._loss, base._agg,
                         extras=base.extras, name=f"{base.name}+noise")
        for attr in ("targets", "gammas", "domain"):
            if hasattr(base, attr):
                setattr(self, attr, getattr(base, attr))

    @property
    def clean(self) -> AggregativeProblem:
        return self.base.clean

    def _perturb(self, i, xi):
        L = self._factors[i]
        return xi + L @ self._rngs[i].standard_normal(L.shape[1])

    def measure(self, i: int, x_i) -> np.ndarray:
        x_i = np.asarray(x_i, dtype=float)
        if self.mode == "per_round":
            return self._perturb(i, x_i)
        return x_i

    def loss(self, i, x_i, sigma):
        x_i = np.asarray(x_i, dtype=float)
        if self.mode == "per_call":
            x_i = self._perturb(i, x_i)
        return super().loss(i, x_i, sigma)

    def agg(self, i, x_i):
        x_i = np.asarray(x_i, dtype=float)
        if self.mode == "per_call":
            x_i = self._perturb(i, x_i)
        return super().agg(i, x_i)

    def grad_x(self, i, x_i, sigma):
        x_i = np.asarray(x_i, dtype=float)
        if self.mode == "per_call":
            x_i = self._perturb(i, x_i)
        return super().grad_x(i, x_i, sigma)

    def grad_sigma(self, i, x_i, sigma):
        x_i = np.asarray(x_i, dtype=float)
        if self.mode == "per_call":
            x_i = self._perturb(i, x_i)
        return super().grad_sigma(i, x_i, sigma)

    def jac_phi(self, i, x_i):
        x_i = np.asarray(x_i, dtype=float)
        if self.mode == "per_call":
            x_i = self._perturb(i, x_i)
        return super().jac_phi(i, x_i)


def _per_agent_covs(noise_cov, local_dims):
    if np.isscalar(noise_cov):
        return [float(noise_cov) * np.eye(k) for k in local_dims]
    C = np.asarray(noise_cov, dtype=float)
    if C.ndim == 2 and len(set(local_dims)) == 1 and C.shape == (local_dims[0],) * 2:
        return [C.copy() for _ in local_dims]
    covs = [np.asarray(c, dtype=float) for c in noise_cov]
    if len(covs) != len(local_dims) or any(c.shape != (k, k) for c, k in zip(covs, local_dims)):
        raise ValueError("noise_cov must be a scalar, one n_i x n_i matrix, or one per agent")
    return covs


def with_measurement_noise(p: AggregativeProblem, noise_cov, seed: int,
                           mode: str = "per_call") -> AggregativeProblem:
    """Wrap ``p`` so oracle inputs are noisy position measurements.

    The caller's arrays are never modified; a dedicated RNG stream is used.
    """
    return NoisyProblem(p, noise_cov, seed, mode=mode)
