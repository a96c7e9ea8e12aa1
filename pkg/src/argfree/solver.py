"""Synchronous-round engines: ARGFree, ARGFree-EM and an exact-gradient baseline.

Each agent i holds ``x_i`` and four tracking variables: ``sigma_i`` and
``s_i`` estimate the aggregate at x and at x + delta*u, ``fp_i`` and ``p_i``
estimate the network loss at those two points. A round is: local descent,
new exploration draw, then one dynamic-consensus update per tracker that
mixes neighbour values and adds the change in the agent's own oracle
readings. Oracle readings from the previous round are cached, so a round
costs exactly two loss and two aggregation queries per agent.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .graph import WeightedDigraph, consensus_gap, validate
from .problem import AggregativeProblem, global_loss
from .smoothing import ExplorationProcess, random_momentum_matrix

ALGORITHMS = ("argfree", "argfree_em", "exact_gradient_baseline")
DIVERGENCE_LIMIT = 1e12


class NumericalAbort(RuntimeError):
    """Raised when the state becomes non-finite or diverges."""

    def __init__(self, iteration: int, reason: str):
        super().__init__(f"numerical abort at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.reason = reason


class TheoryWarning(UserWarning):
    """A convergence-theory precondition does not hold for this run."""


@dataclass
class ExplorationSpec:
    """How u is generated. ``B``/``Sigma_v``/``Sigma_u0`` are per-agent lists."""

    mode: str = "iid"
    B: Optional[list] = None
    Sigma_v: Optional[list] = None
    Sigma_u0: Optional[list] = None

    @classmethod
    def momentum_kappa(cls, local_dims, kappa: float, sigma_v_scale: Optional[float] = None,
                       sigma_u0_scale: float = 1.0) -> "ExplorationSpec":
        """B_i = kappa I. Without ``sigma_v_scale`` the innovation covariance is
        (1 - kappa^2) * sigma_u0_scale * I, so Sigma_u stays at its stationary value."""
        if sigma_v_scale is None:
            sigma_v_scale = (1.0 - kappa ** 2) * sigma_u0_scale
        return cls("momentum",
                   B=[kappa * np.eye(k) for k in local_dims],
                   Sigma_v=[sigma_v_scale * np.eye(k) for k in local_dims],
                   Sigma_u0=[sigma_u0_scale * np.eye(k) for k in local_dims])

    @classmethod
    def momentum_random(cls, local_dims, seed: int, eig_range=(0.9, 1.0),
                        sigma_v_scale: float = 0.16, sigma_u0_scale: float = 1.0) -> "ExplorationSpec":
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
        return cls("momentum",
                   B=[random_momentum_matrix(k, rng, eig_range) for k in local_dims],
                   Sigma_v=[sigma_v_scale * np.eye(k) for k in local_dims],
                   Sigma_u0=[sigma_u0_scale * np.eye(k) for k in local_dims])


@dataclass
class SolverConfig:
    algorithm: str = "argfree"
    alpha: float = 2e-3
    delta: float = 1e-5
    exploration: ExplorationSpec = field(default_factory=ExplorationSpec)
    k_max: int = 1000
    seed: int = 0
    record_every: int = 1
    warn_on_theory_violation: bool = True
    x0: Optional[np.ndarray] = None
    x0_box: tuple = (0.0, 10.0)
    stream_ids: Optional[List[int]] = None
    u0: Optional[np.ndarray] = None  # overrides the first exploration draw

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if not (self.alpha > 0 and self.delta > 0):
            raise ValueError("alpha and delta must be positive")
        if self.k_max < 0 or self.record_every < 1:
            raise ValueError("need k_max >= 0 and record_every >= 1")
        if self.algorithm == "argfree" and self.exploration.mode != "iid":
            raise ValueError("argfree uses i.i.d. exploration; use argfree_em for momentum")


@dataclass
class SolverState:
    """Complete synchronous-round state. Per-agent rows; x and u are stacked."""

    k: int
    x: np.ndarray
    sigma: np.ndarray
    delta: float = 0.0
    s: Optional[np.ndarray] = None
    fp: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    explorer: Optional[ExplorationProcess] = None
    # previous-round oracle readings
    phi_x: Optional[np.ndarray] = None
    phi_xu: Optional[np.ndarray] = None
    f_x: Optional[np.ndarray] = None
    f_xu: Optional[np.ndarray] = None
    g_sigma: Optional[np.ndarray] = None

    @property
    def u(self) -> Optional[np.ndarray]:
        return None if self.explorer is None else np.concatenate(self.explorer.u)

    @property
    def cov(self):
        return None if self.explorer is None else self.explorer.cov


@dataclass
class RunTrace:
    algorithm: str
    local_dims: tuple
    seed: int
    k: np.ndarray
    x: np.ndarray
    loss: np.ndarray
    grad_norm: np.ndarray
    theta: np.ndarray
    loss_evals: np.ndarray
    agg_evals: np.ndarray
    gradient_evals: np.ndarray
    wall: np.ndarray

    @property
    def n_agents(self) -> int:
        return len(self.local_dims)


# ---------------------------------------------------------------------------

def _check_compat(problem: AggregativeProblem, graph: WeightedDigraph):
    if graph.n_agents != problem.n_agents:
        raise ValueError(f"graph has {graph.n_agents} agents, problem has {problem.n_agents}")


def _initial_x(problem, config) -> np.ndarray:
    if config.x0 is not None:
        x0 = np.array(config.x0, dtype=float).ravel()
        if x0.shape != (problem.n,):
            raise ValueError(f"x0 must have length {problem.n}")
        return x0
    lo, hi = config.x0_box
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2,)))
    return rng.uniform(lo, hi, size=problem.n)


def init(problem: AggregativeProblem, graph: WeightedDigraph, config: SolverConfig) -> SolverState:
    _check_compat(problem, graph)
    rep = validate(graph)
    if not rep.ok:
        raise ValueError(f"graph violates the topology assumptions: {rep}")
    x = _initial_x(problem, config)
    N, d = problem.n_agents, problem.agg_dim
    xs = problem.split(x)

    if config.algorithm == "exact_gradient_baseline":
        sigma = np.empty((N, d))
        y = np.empty((N, d))
        for i in range(N):
            xm = problem.measure(i, xs[i])
            sigma[i] = problem.agg(i, xm)
        phi_x = sigma.copy()
        for i in range(N):
            y[i] = problem.grad_sigma(i, problem.measure(i, xs[i]), sigma[i])
        return SolverState(k=0, x=x, sigma=sigma, y=y, phi_x=phi_x, g_sigma=y.copy())

    ex = config.exploration
    explorer = ExplorationProcess(problem.local_dims, config.seed, mode=ex.mode, B=ex.B,
                                  Sigma_v=ex.Sigma_v, Sigma_u0=ex.Sigma_u0,
                                  stream_ids=config.stream_ids)
    if config.u0 is not None:
        u0 = np.array(config.u0, dtype=float).ravel()
        if u0.shape != (problem.n,):
            raise ValueError(f"u0 must have length {problem.n}")
        explorer.u = [b.copy() for b in problem.split(u0)]
    delta = config.delta
    phi_x = np.empty((N, d))
    phi_xu = np.empty((N, d))
    f_x = np.empty(N)
    f_xu = np.empty(N)
    for i in range(N):
        xm = problem.measure(i, xs[i])
        xu = xm + delta * explorer.u[i]
        phi_x[i] = problem.agg(i, xm)
        phi_xu[i] = problem.agg(i, xu)
        f_x[i] = problem.loss(i, xm, phi_x[i])
        f_xu[i] = problem.loss(i, xu, phi_xu[i])
    return SolverState(k=0, x=x, sigma=phi_x.copy(), delta=delta, s=phi_xu.copy(), fp=f_x.copy(),
                       p=f_xu.copy(), explorer=explorer, phi_x=phi_x, phi_xu=phi_xu,
                       f_x=f_x, f_xu=f_xu)


def _guard(state: SolverState, k: int):
    if not np.all(np.isfinite(state.x)):
        raise NumericalAbort(k, "non-finite decision variable")
    for name in ("sigma", "s", "fp", "p", "y"):
        v = getattr(state, name)
        if v is not None and not np.all(np.isfinite(v)):
            raise NumericalAbort(k, f"non-finite tracking variable {name}")
    if np.linalg.norm(state.x) > DIVERGENCE_LIMIT:
        raise NumericalAbort(k, "decision variable exceeded divergence limit")


def step(state: SolverState, problem: AggregativeProblem, graph: WeightedDigraph,
         config: SolverConfig) -> SolverState:
    """One synchronous ARGFree / ARGFree-EM round (mutates and returns ``state``)."""
    if config.algorithm == "exact_gradient_baseline":
        return baseline_gradient_tracking_step(state, problem, graph, config)
    N, d = problem.n_agents, problem.agg_dim
    alpha, delta = config.alpha, config.delta
    em = config.algorithm == "argfree_em"
    explorer = state.explorer
    off = problem.offsets

    # line 1: local descent with the current direction
    x_new = state.x.copy()
    for i in range(N):
        w = explorer.whitened(i) if em else explorer.u[i]
        x_new[off[i]:off[i + 1]] -= (alpha / delta) * (state.p[i] - state.fp[i]) * w

    # line 2 (and covariance update for EM)
    explorer.step()

    # lines 3-6: neighbour mixing of the previous trackers
    Z = np.hstack([state.sigma, state.s, state.fp[:, None], state.p[:, None]])
    mixed = graph.mix(Z)
    sigma = mixed[:, :d]
    s = mixed[:, d:2 * d]
    fp = mixed[:, 2 * d]
    p = mixed[:, 2 * d + 1]

    phi_x = np.empty((N, d))
    phi_xu = np.empty((N, d))
    f_x = np.empty(N)
    f_xu = np.empty(N)
    for i in range(N):
        xm = problem.measure(i, x_new[off[i]:off[i + 1]])
        xu = xm + delta * explorer.u[i]
        phi_x[i] = problem.agg(i, xm)
        phi_xu[i] = problem.agg(i, xu)
        sigma[i] += phi_x[i] - state.phi_x[i]
        s[i] += phi_xu[i] - state.phi_xu[i]
        f_x[i] = problem.loss(i, xm, sigma[i])
        f_xu[i] = problem.loss(i, xu, s[i])
    fp += f_x - state.f_x
    p += f_xu - state.f_xu

    state.x = x_new
    state.sigma, state.s, state.fp, state.p = sigma, s, fp, p
    state.phi_x, state.phi_xu, state.f_x, state.f_xu = phi_x, phi_xu, f_x, f_xu
    state.k += 1
    _guard(state, state.k)
    return state


def baseline_gradient_tracking_step(state: SolverState, problem: AggregativeProblem,
                                    graph: WeightedDigraph, config: SolverConfig) -> SolverState:
    """Exact-gradient aggregative tracking round.

    x_i <- x_i - alpha (grad_1 f_i(x_i, sigma_i) + Dphi_i(x_i)^T y_i), with
    sigma tracking the aggregate and y tracking (1/N) sum_j grad_2 f_j.
    """
    if not problem.extras.has_gradients:
        raise ValueError("the exact-gradient baseline needs analytic gradients")
    N = problem.n_agents
    off = problem.offsets
    alpha = config.alpha
    x_new = state.x.copy()
    for i in range(N):
        xm = problem.measure(i, state.x[off[i]:off[i + 1]])
        g = problem.grad_x(i, xm, state.sigma[i]) + problem.jac_phi(i, xm).T @ state.y[i]
        x_new[off[i]:off[i + 1]] -= alpha * g

    d = problem.agg_dim
    mixed = graph.mix(np.hstack([state.sigma, state.y]))
    sigma = mixed[:, :d]
    y = mixed[:, d:]
    phi_x = np.empty_like(state.phi_x)
    g_sigma = np.empty_like(state.g_sigma)
    for i in range(N):
        xm = problem.measure(i, x_new[off[i]:off[i + 1]])
        phi_x[i] = problem.agg(i, xm)
        sigma[i] += phi_x[i] - state.phi_x[i]
        g_sigma[i] = problem.grad_sigma(i, xm, sigma[i])
        y[i] += g_sigma[i] - state.g_sigma[i]

    state.x = x_new
    state.sigma, state.y = sigma, y
    state.phi_x, state.g_sigma = phi_x, g_sigma
    state.k += 1
    _guard(state, state.k)
    return state


def theta(state: SolverState, x_star=None) -> np.ndarray:
    """(||x - x*||, consensus gaps of sigma, s, fp, p); first entry dropped without x*.

    Trackers a run does not carry (the baseline has no s, fp, p) are NaN.
    """
    N = state.sigma.shape[0]
    gaps = [consensus_gap(v, N) if v is not None else np.nan
            for v in (state.sigma, state.s, state.fp, state.p)]
    if x_star is None:
        return np.array(gaps)
    return np.array([np.linalg.norm(state.x - np.asarray(x_star, float))] + gaps)


def tracking_residuals(state: SolverState, problem: AggregativeProblem) -> np.ndarray:
    """Relative errors of the four average-preservation identities.

    Compares the network averages of sigma, s, fp, p with the aggregate at
    x, the aggregate at x + delta u, (1/N) sum f_i(x_i, sigma_i) and
    (1/N) sum f_i(x_i + delta u_i, s_i). Oracles are queried uncounted.
    """
    N = problem.n_agents
    xs = problem.split(state.x)
    xu = [xs[i] + state.delta * state.explorer.u[i] for i in range(N)]
    with problem.uncounted():
        targets = [sum(problem.agg(i, xs[i]) for i in range(N)) / N,
                   sum(problem.agg(i, xu[i]) for i in range(N)) / N,
                   np.mean([problem.loss(i, xs[i], state.sigma[i]) for i in range(N)]),
                   np.mean([problem.loss(i, xu[i], state.s[i]) for i in range(N)])]
    avgs = [state.sigma.mean(axis=0), state.s.mean(axis=0), state.fp.mean(), state.p.mean()]
    return np.array([np.linalg.norm(np.atleast_1d(a - t)) / (1.0 + np.linalg.norm(np.atleast_1d(t)))
                     for a, t in zip(avgs, targets)])


# ---------------------------------------------------------------------------

def theory_violations(problem: AggregativeProblem, graph: WeightedDigraph,
                      config: SolverConfig) -> list:
    """Human-readable list of convergence preconditions that fail (empty if none
    fail or the problem declares no constants)."""
    from .certify import TheoryConstants, stepsize_bounds

    c = problem.extras.constants
    if c is None or config.algorithm == "exact_gradient_baseline":
        return []
    tc = TheoryConstants.from_problem(problem, validate(graph))
    a_c, a1, a2 = stepsize_bounds(tc, config.delta)
    out = []
    alpha, delta, n = config.alpha, config.delta, tc.n
    if not alpha < min(a_c, a1, a2):
        out.append(f"alpha={alpha:g} violates the stepsize bound min({a_c:.3g}, {a1:.3g}, {a2:.3g})")
    if not delta < alpha * np.sqrt(n):
        out.append(f"delta={delta:g} is not below alpha*sqrt(n)={alpha * np.sqrt(n):.3g}")
    lim = (1.0 - tc.rho_A) / tc.norm_A_minus_I
    if not tc.L0_hat < lim:
        out.append(f"L0_hat={tc.L0_hat:.3g} is not below (1-rho_A)/||A-I||={lim:.3g}")
    return out


class _Recorder:
    def __init__(self, problem, config, x_star):
        self.problem = problem
        self.clean = problem.clean
        self.x_star = x_star
        self.has_grad = problem.clean.extras.has_gradients
        self.rows = []
        self.t0 = time.perf_counter()

    def record(self, state):
        with self.clean.uncounted():
            loss = global_loss(self.clean, state.x)
            gn = float(np.linalg.norm(self.clean.full_gradient(state.x))) if self.has_grad else np.nan
        th = theta(state, self.x_star)
        if th.size == 4:
            th = np.concatenate([[np.nan], th])
        c = self.problem.counters
        self.rows.append((state.k, state.x.copy(), loss, gn, th, int(c.loss_evals.sum()),
                          int(c.agg_evals.sum()), int(c.gradient_evals.sum()),
                          time.perf_counter() - self.t0))

    def trace(self, config, local_dims) -> RunTrace:
        cols = list(zip(*self.rows))
        return RunTrace(
            algorithm=config.algorithm, local_dims=tuple(local_dims), seed=config.seed,
            k=np.array(cols[0], dtype=np.int64), x=np.array(cols[1]),
            loss=np.array(cols[2]), grad_norm=np.array(cols[3]), theta=np.array(cols[4]),
            loss_evals=np.array(cols[5], dtype=np.int64), agg_evals=np.array(cols[6], dtype=np.int64),
            gradient_evals=np.array(cols[7], dtype=np.int64), wall=np.array(cols[8]))


def run(problem: AggregativeProblem, graph: WeightedDigraph, config: SolverConfig,
        callback=None) -> RunTrace:
    """Execute ``k_max`` rounds, recording every ``record_every`` and the last one.

    ``callback(state)`` is invoked after initialization and after every round.
    """
    if config.warn_on_theory_violation:
        for msg in theory_violations(problem.clean, graph, config):
            warnings.warn(msg, TheoryWarning, stacklevel=2)
    state = init(problem, graph, config)
    rec = _Recorder(problem, config, problem.clean.extras.x_star)
    rec.record(state)
    if callback is not None:
        callback(state)
    for _ in range(config.k_max):
        step(state, problem, graph, config)
        if callback is not None:
            callback(state)
        if state.k % config.record_every == 0 or state.k == config.k_max:
            rec.record(state)
    return rec.trace(config, problem.local_dims)
