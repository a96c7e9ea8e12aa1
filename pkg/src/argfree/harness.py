"""Experiment configuration, Monte Carlo replication and trace persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .certify import Certificate, TheoryConstants, certify, em_trace
from .graph import WeightedDigraph, erdos_renyi, validate
from .problem import (AggregativeProblem, global_loss, load_benchmark, random_formation,
                      with_measurement_noise)
from .solver import ExplorationSpec, NumericalAbort, RunTrace, SolverConfig, run

RELATIVE_LOSS_CONVENTION = "(f(x_k) - f*) / (f(x_0) - f*), f* the closed-form optimum value"
SWEEP_PARAMS = ("delta", "alpha", "momentum_kappa")
EXPLORATIONS = ("auto", "iid", "momentum_random", "momentum_kappa")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class ReplicaAbort(RuntimeError):
    def __init__(self, seed: int, cause: NumericalAbort):
        super().__init__(f"replica with seed {seed} aborted: {cause}")
        self.seed = seed
        self.iteration = cause.iteration


@dataclass
class ExperimentConfig:
    """Flat experiment description; defaults reproduce the formation experiment."""

    algorithm: str = "argfree"
    # problem
    n_agents: int = 5
    dim: int = 2
    gamma: float = 2.0
    target_box: tuple = (0.0, 10.0)
    problem_seed: int = 0
    problem_file: Optional[str] = None
    # graph
    edge_prob: float = 0.6
    graph_seed: int = 0
    graph_file: Optional[str] = None
    # solver
    alpha: float = 2e-3
    delta: float = 1e-5
    k_max: int = 8000
    record_every: int = 20
    seed: int = 0
    x0_box: tuple = (0.0, 10.0)
    warn_on_theory_violation: bool = True
    # exploration; "auto" is iid for argfree and momentum_random for argfree_em
    exploration: str = "auto"
    momentum_eig_range: tuple = (0.9, 1.0)
    momentum_kappa: float = 0.95
    sigma_v_scale: float = 0.16
    sigma_u0_scale: float = 1.0
    match_stationary: bool = True
    # measurement noise
    noise_cov_scale: Optional[float] = None
    noise_mode: str = "per_call"
    # replication and output
    n_monte_carlo: int = 10
    output_dir: Optional[str] = None
    output_format: str = "csv"

    def __post_init__(self):
        for name in ("target_box", "x0_box", "momentum_eig_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        try:
            SolverConfig(self.algorithm, self.alpha, self.delta, k_max=self.k_max,
                         record_every=self.record_every)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.exploration not in EXPLORATIONS:
            raise ConfigError(f"exploration must be one of {EXPLORATIONS}")
        if self.algorithm == "argfree" and self.exploration not in ("auto", "iid"):
            raise ConfigError("argfree uses i.i.d. exploration")
        if self.n_monte_carlo < 1:
            raise ConfigError("n_monte_carlo must be positive")
        if self.output_format not in ("csv", "json"):
            raise ConfigError("output_format must be csv or json")
        if self.noise_mode not in ("per_call", "per_round"):
            raise ConfigError("noise_mode must be per_call or per_round")
        if self.noise_cov_scale is not None and self.noise_cov_scale < 0:
            raise ConfigError("noise_cov_scale must be non-negative")
        for name in ("problem_file", "graph_file"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name} {path!r} does not exist")

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_json(doc)

    def replace(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update(kw)
        return ExperimentConfig(**d)


# ---------------------------------------------------------------------------

def build_problem(cfg: ExperimentConfig) -> AggregativeProblem:
    if cfg.problem_file is not None:
        return load_benchmark(cfg.problem_file)
    return random_formation(cfg.n_agents, cfg.dim, cfg.gamma, cfg.problem_seed, cfg.target_box)


def build_graph(cfg: ExperimentConfig, n_agents: int) -> WeightedDigraph:
    if cfg.graph_file is not None:
        g = WeightedDigraph.load(cfg.graph_file)
    else:
        g = erdos_renyi(n_agents, cfg.edge_prob, cfg.graph_seed)
    if g.n_agents != n_agents:
        raise ConfigError(f"graph has {g.n_agents} agents, problem has {n_agents}")
    return g


def exploration_spec(cfg: ExperimentConfig, local_dims, seed: int) -> ExplorationSpec:
    mode = cfg.exploration
    if mode == "auto":
        mode = "momentum_random" if cfg.algorithm == "argfree_em" else "iid"
    if mode == "iid":
        return ExplorationSpec()
    if mode == "momentum_kappa":
        sv = None if cfg.match_stationary else cfg.sigma_v_scale
        return ExplorationSpec.momentum_kappa(local_dims, cfg.momentum_kappa, sv, cfg.sigma_u0_scale)
    return ExplorationSpec.momentum_random(local_dims, seed, cfg.momentum_eig_range,
                                           cfg.sigma_v_scale, cfg.sigma_u0_scale)


def solver_config(cfg: ExperimentConfig, local_dims, seed: int) -> SolverConfig:
    return SolverConfig(algorithm=cfg.algorithm, alpha=cfg.alpha, delta=cfg.delta,
                        exploration=exploration_spec(cfg, local_dims, seed), k_max=cfg.k_max,
                        seed=seed, record_every=cfg.record_every,
                        warn_on_theory_violation=cfg.warn_on_theory_violation,
                        x0_box=cfg.x0_box)


def optimum_value(problem: AggregativeProblem) -> Optional[float]:
    x_star = problem.clean.extras.x_star
    if x_star is None:
        return None
    with problem.clean.uncounted():
        return global_loss(problem.clean, x_star)


def relative_loss(trace: RunTrace, f_star: float) -> np.ndarray:
    denom = trace.loss[0] - f_star
    if denom == 0:
        raise ValueError("relative loss is undefined when f(x_0) = f*")
    return (trace.loss - f_star) / denom


@dataclass
class AggregatedStats:
    k: np.ndarray
    n_runs: int
    rel_loss_mean: np.ndarray
    rel_loss_std: np.ndarray
    loss_mean: np.ndarray
    loss_std: np.ndarray
    grad_norm_mean: np.ndarray
    grad_norm_std: np.ndarray
    theta_mean: np.ndarray
    theta_std: np.ndarray

    @property
    def terminal_error_mean(self) -> float:
        return float(self.theta_mean[-1, 0])

    @property
    def terminal_rel_loss_mean(self) -> float:
        return float(self.rel_loss_mean[-1])


def aggregate_traces(traces: List[RunTrace], f_star: Optional[float]) -> AggregatedStats:
    """Per-iteration mean and population standard deviation across runs."""
    if not traces:
        raise ValueError("no traces to aggregate")
    k = traces[0].k
    if any(not np.array_equal(t.k, k) for t in traces):
        raise ValueError("traces are recorded at different iterations")
    loss = np.array([t.loss for t in traces])
    rel = (np.array([relative_loss(t, f_star) for t in traces]) if f_star is not None
           else np.full_like(loss, np.nan))
    gn = np.array([t.grad_norm for t in traces])
    th = np.array([t.theta for t in traces])
    return AggregatedStats(k=k.copy(), n_runs=len(traces),
                           rel_loss_mean=rel.mean(0), rel_loss_std=rel.std(0),
                           loss_mean=loss.mean(0), loss_std=loss.std(0),
                           grad_norm_mean=gn.mean(0), grad_norm_std=gn.std(0),
                           theta_mean=th.mean(0), theta_std=th.std(0))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    stats: AggregatedStats
    traces: List[RunTrace]
    f_star: Optional[float]
    seeds: List[int]


def run_replica(cfg: ExperimentConfig, replica: int, problem=None, graph=None) -> RunTrace:
    seed = cfg.seed + replica
    problem = build_problem(cfg) if problem is None else problem
    graph = build_graph(cfg, problem.n_agents) if graph is None else graph
    if cfg.noise_cov_scale:
        problem = with_measurement_noise(problem, cfg.noise_cov_scale, seed, cfg.noise_mode)
    try:
        return run(problem, graph, solver_config(cfg, problem.local_dims, seed))
    except NumericalAbort as e:
        raise ReplicaAbort(seed, e) from e


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run ``n_monte_carlo`` replicas (seed = cfg.seed + r) on a fixed problem and graph.

    Each replica gets fresh x0, exploration and (for random momentum) B_i.
    Nothing is aggregated if any replica aborts.
    """
    problem = build_problem(cfg)
    graph = build_graph(cfg, problem.n_agents)
    traces = []
    for r in range(cfg.n_monte_carlo):
        problem.reset_counts()
        traces.append(run_replica(cfg, r, problem, graph))
    f_star = optimum_value(problem)
    stats = aggregate_traces(traces, f_star)
    seeds = [cfg.seed + r for r in range(cfg.n_monte_carlo)]
    res = ExperimentResult(cfg, stats, traces, f_star, seeds)
    if write and cfg.output_dir is not None:
        write_outputs(res, Path(cfg.output_dir))
    return res


# ---------------------------------------------------------------------------
# persistence

def _fmt(v) -> str:
    return format(float(v), ".17g")


def trace_columns(local_dims) -> list:
    xs = [f"x_{i}_{j}" for i, k in enumerate(local_dims) for j in range(k)]
    return (["k"] + xs + ["loss", "grad_norm"] + [f"theta_{m}" for m in range(1, 6)]
            + ["loss_evals", "agg_evals"])


def _trace_rows(trace: RunTrace):
    for r in range(len(trace.k)):
        yield ([str(int(trace.k[r]))] + [_fmt(v) for v in trace.x[r]]
               + [_fmt(trace.loss[r]), _fmt(trace.grad_norm[r])]
               + [_fmt(v) for v in trace.theta[r]]
               + [str(int(trace.loss_evals[r])), str(int(trace.agg_evals[r]))])


def export_trace(trace: RunTrace, path, fmt: str = "csv") -> Path:
    path = Path(path)
    cols = trace_columns(trace.local_dims)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows(_trace_rows(trace))
    elif fmt == "json":
        doc = {"algorithm": trace.algorithm, "seed": trace.seed,
               "local_dims": list(trace.local_dims), "columns": cols,
               "rows": [[json.loads(c) if c not in ("nan", "inf", "-inf") else c for c in row]
                        for row in _trace_rows(trace)]}
        path.write_text(json.dumps(doc))
    else:
        raise ValueError("fmt must be csv or json")
    return path


def _dims_from_columns(cols) -> tuple:
    counts = {}
    for c in cols:
        if c.startswith("x_"):
            i = int(c.split("_")[1])
            counts[i] = counts.get(i, 0) + 1
    return tuple(counts[i] for i in sorted(counts))


def _trace_from_table(cols, rows, algorithm="unknown", seed=-1) -> RunTrace:
    dims = _dims_from_columns(cols)
    if cols != trace_columns(dims):
        raise ValueError("unexpected trace columns")
    A = np.array([[float(v) for v in row] for row in rows], dtype=float).reshape(-1, len(cols))
    n = sum(dims)
    return RunTrace(algorithm=algorithm, local_dims=dims, seed=seed,
                    k=A[:, 0].astype(np.int64), x=A[:, 1:1 + n], loss=A[:, 1 + n],
                    grad_norm=A[:, 2 + n], theta=A[:, 3 + n:8 + n],
                    loss_evals=A[:, 8 + n].astype(np.int64), agg_evals=A[:, 9 + n].astype(np.int64),
                    gradient_evals=np.zeros(len(A), dtype=np.int64), wall=np.zeros(len(A)))


def parse_trace(path) -> RunTrace:
    """Inverse of :func:`export_trace` (format chosen by file suffix).

    Gradient-oracle counts and wall-clock are not persisted and come back as zeros.
    """
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        return _trace_from_table(doc["columns"], doc["rows"], doc["algorithm"], doc["seed"])
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        cols = next(r)
        rows = list(r)
    return _trace_from_table(cols, rows)


def export_stats(stats: AggregatedStats, path) -> Path:
    path = Path(path)
    cols = (["k", "n_runs", "rel_loss_mean", "rel_loss_std", "loss_mean", "loss_std",
             "grad_norm_mean", "grad_norm_std"]
            + [f"theta_{m}_mean" for m in range(1, 6)] + [f"theta_{m}_std" for m in range(1, 6)])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in range(len(stats.k)):
            w.writerow([str(int(stats.k[r])), str(stats.n_runs)]
                       + [_fmt(v) for v in (stats.rel_loss_mean[r], stats.rel_loss_std[r],
                                            stats.loss_mean[r], stats.loss_std[r],
                                            stats.grad_norm_mean[r], stats.grad_norm_std[r])]
                       + [_fmt(v) for v in stats.theta_mean[r]]
                       + [_fmt(v) for v in stats.theta_std[r]])
    return path


def write_outputs(res: ExperimentResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ext = res.config.output_format
    for tr in res.traces:
        export_trace(tr, out / f"trace_seed{tr.seed}.{ext}", ext)
    export_stats(res.stats, out / "stats.csv")
    meta = {"config": res.config.to_json(), "seeds": res.seeds, "f_star": res.f_star,
            "relative_loss": RELATIVE_LOSS_CONVENTION,
            "std": "population standard deviation across replicas"}
    (out / "metadata.json").write_text(json.dumps(meta, indent=1))


# ---------------------------------------------------------------------------

def sweep(cfg: ExperimentConfig, parameter: str, values) -> list:
    """One experiment per value; rows of (value, mean terminal ||x - x*||, mean terminal relative loss)."""
    if parameter not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    rows = []
    for v in values:
        kw = {parameter: float(v)}
        if cfg.output_dir is not None:
            kw["output_dir"] = str(Path(cfg.output_dir) / f"{parameter}={v}")
        res = run_experiment(cfg.replace(**kw))
        rows.append((float(v), res.stats.terminal_error_mean, res.stats.terminal_rel_loss_mean))
    if cfg.output_dir is not None:
        p = Path(cfg.output_dir) / f"sweep_{parameter}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([parameter, "terminal_error_mean", "terminal_rel_loss_mean"])
            w.writerows([[_fmt(a), _fmt(b), _fmt(c)] for a, b, c in rows])
    return rows


def certificate_for(cfg: ExperimentConfig) -> Certificate:
    """Certificate for the configured problem, graph and (alpha, delta).

    Momentum runs use E||u_{k+1} - u_k||^2 at stationarity; i.i.d. runs use 2n.
    """
    problem = build_problem(cfg)
    graph = build_graph(cfg, problem.n_agents)
    c = TheoryConstants.from_problem(problem, validate(graph))
    spec = exploration_spec(cfg, problem.local_dims, cfg.seed)
    if spec.mode == "momentum":
        B = _block_diag(spec.B)
        Sv = _block_diag(spec.Sigma_v)
        return certify(c, cfg.alpha, cfg.delta, E_du_sq=em_trace(B, Sv), B=B, Sigma_v=Sv)
    return certify(c, cfg.alpha, cfg.delta)


def _block_diag(blocks) -> np.ndarray:
    blocks = [np.atleast_2d(b) for b in blocks]
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    o = 0
    for b in blocks:
        k = b.shape[0]
        out[o:o + k, o:o + k] = b
        o += k
    return out

