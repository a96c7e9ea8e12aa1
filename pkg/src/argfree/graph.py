"""Communication topologies: generation, Metropolis weighting, validation.

A topology is stored as its weight matrix ``A`` with the convention
``a_ij > 0`` iff agent ``i`` receives from agent ``j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DS_TOL = 1e-12
MAX_RESAMPLES = 1000


class GraphError(ValueError):
    """Raised for malformed or unusable topologies."""


@dataclass(frozen=True)
class WeightedDigraph:
    """Agent communication topology with its weight matrix.

    Attributes:
        weights: N x N matrix A; ``weights[i, j] > 0`` means j sends to i.
    """

    weights: np.ndarray
    neighbors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = np.array(self.weights, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise GraphError(f"weights must be a non-empty square matrix, got shape {A.shape}")
        A.setflags(write=False)
        object.__setattr__(self, "weights", A)
        nbrs = tuple(np.flatnonzero(A[i] != 0.0) for i in range(A.shape[0]))
        object.__setattr__(self, "neighbors", nbrs)

    @property
    def n_agents(self) -> int:
        return self.weights.shape[0]

    @property
    def edges(self) -> set:
        """Set of directed edges (j, i) with a_ij > 0."""
        rows, cols = np.nonzero(self.weights > 0)
        return {(int(j), int(i)) for i, j in zip(rows, cols)}

    def mix(self, Z: np.ndarray) -> np.ndarray:
        """Row i of the result is sum over in-neighbours j of a_ij * Z[j].

        Only neighbour rows of ``Z`` are read for each agent.
        """
        Z = np.asarray(Z, dtype=float)
        out = np.empty_like(Z)
        A = self.weights
        for i, nb in enumerate(self.neighbors):
            out[i] = A[i, nb] @ Z[nb]
        return out

    def to_json(self) -> dict:
        return {"n": self.n_agents, "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "WeightedDigraph":
        n = int(doc["n"])
        W = np.asarray(doc["weights"], dtype=float)
        if W.ndim == 1:
            W = W.reshape(n, n)
        if W.shape != (n, n):
            raise GraphError(f"weights shape {W.shape} does not match n={n}")
        return cls(W)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "WeightedDigraph":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class GraphReport:
    doubly_stochastic: bool
    strongly_connected: bool
    nonnegative: bool
    rho_A: float
    norm_A_minus_I: float

    @property
    def ok(self) -> bool:
        return (self.doubly_stochastic and self.strongly_connected
                and self.nonnegative and self.rho_A < 1.0)


def _top_eigenvalue_psd(S: np.ndarray, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    n = S.shape[0]
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = S @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        lam_new = float(v @ w)
        v = w / nw
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            return lam_new
        lam = lam_new
    return lam


def operator_norm(M: np.ndarray) -> float:
    """Spectral norm (largest singular value) via power iteration on M^T M."""
    M = np.asarray(M, dtype=float)
    return float(np.sqrt(max(_top_eigenvalue_psd(M.T @ M), 0.0)))


def is_strongly_connected(W: np.ndarray) -> bool:
    """Reachability on the nonzero pattern, forwards and backwards from node 0."""
    P = np.asarray(W) != 0
    n = P.shape[0]

    def reach(adj):
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        stack = [0]
        while stack:
            k = stack.pop()
            for j in np.flatnonzero(adj[k]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        return seen.all()

    return reach(P) and reach(P.T)


def metropolis_weights(adjacency) -> np.ndarray:
    """Metropolis-Hastings weights for an undirected graph.

    ``a_ij = 1 / (1 + max(deg_i, deg_j))`` on edges and the remaining mass on
    the diagonal, so the result is symmetric and doubly stochastic. Any
    diagonal entries of ``adjacency`` are ignored (self-loops are implicit).
    """
    Adj = np.asarray(adjacency)
    if Adj.ndim != 2 or Adj.shape[0] != Adj.shape[1]:
        raise GraphError("adjacency must be square")
    if not np.array_equal(Adj, Adj.T):
        raise GraphError("adjacency must be symmetric")
    E = (Adj != 0).astype(float)
    np.fill_diagonal(E, 0.0)
    deg = E.sum(axis=1)
    W = E / (1.0 + np.maximum.outer(deg, deg))
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return W


def erdos_renyi(n_agents: int, edge_prob: float, seed: int) -> WeightedDigraph:
    """Connected undirected G(n, p) sample with Metropolis weights.

    Samples are redrawn from the same seeded stream until connected.
    """
    if n_agents < 2:
        raise GraphError("erdos_renyi needs n_agents >= 2")
    if not 0.0 < edge_prob <= 1.0:
        raise GraphError("edge_prob must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n_agents, k=1)
    for _ in range(MAX_RESAMPLES):
        adj = np.zeros((n_agents, n_agents), dtype=int)
        adj[iu] = rng.random(len(iu[0])) < edge_prob
        adj = adj + adj.T
        if is_strongly_connected(adj + np.eye(n_agents, dtype=int)):
            return WeightedDigraph(metropolis_weights(adj))
    raise GraphError(
        f"no connected sample in {MAX_RESAMPLES} draws (n={n_agents}, p={edge_prob}); "
        "edge_prob is too small")


def validate(g: WeightedDigraph) -> GraphReport:
    A = g.weights
    N = g.n_agents
    ds = bool(np.all(np.abs(A.sum(axis=1) - 1.0) <= DS_TOL)
              and np.all(np.abs(A.sum(axis=0) - 1.0) <= DS_TOL))
    J = np.full((N, N), 1.0 / N)
    return GraphReport(
        doubly_stochastic=ds,
        strongly_connected=is_strongly_connected(A),
        nonnegative=bool(np.all(A >= 0.0)),
        rho_A=operator_norm(A - J),
        norm_A_minus_I=operator_norm(A - np.eye(N)),
    )


def consensus_gap(v, n_agents: int) -> float:
    """||v - (J kron I_d) v|| for v stacked as N blocks of equal size d."""
    v = np.asarray(v, dtype=float).ravel()
    if n_agents < 1 or v.size % n_agents:
        raise ValueError(f"length {v.size} is not divisible by N={n_agents}")
    blocks = v.reshape(n_agents, -1)
    return float(np.linalg.norm(blocks - blocks.mean(axis=0)))
