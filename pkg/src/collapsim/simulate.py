"""Monte Carlo driver for the interactive training protocol.

One trial: every non-natural node first fits its own fresh draw from
the true model (round 0). Each later round, every edge ships a fresh
synthetic dataset sampled from the source node's current parameters,
each learner refits on its pooled in-edge data, and everything else
stays frozen. A benchmark fit consumes the same pooled sample count
drawn from the true model, so the per-round risk ratio isolates the
effect of training on machine output instead of reality.

Risks are mean squared parameter errors aggregated over independent
trials. Every random draw comes from a seed-plus-key-path substream, so
a parallel run reduces to exactly the serial byte sequence.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import BROADCAST, SampleSchedule, realized_transfer
from .graphs import InteractionGraph, NodeId, validate
from .models import (
    Dataset,
    LossModel,
    ModelError,
    SolverOptions,
    fit,
    make_model,
)
from .rng import (
    DOMAIN_BETA_STAR,
    DOMAIN_EDGE,
    DOMAIN_INIT,
    DOMAIN_ORACLE,
    DOMAIN_SOURCE,
    substream,
)

RANDOM_NORMAL = "random_normal"
FIXED = "fixed"
RAW = "raw"
SIGN_ALIGNED = "sign_aligned"

SINGLE_INDEX = "single_index_quadratic"


class SimulationError(RuntimeError):
    pass


class NoConvergence(SimulationError):
    """A solver returned its best iterate without meeting tolerance."""


class TooManyFailedTrials(SimulationError):
    """More than 1% of trials aborted on solver failure."""


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Everything one Monte Carlo run depends on.

    beta_star_mode random_normal draws the ground truth once per run
    from the seed; fixed uses the supplied vector. sign_aligned risk
    scores min over the two signs and only affects the single-index
    kind, whose loss cannot tell beta from -beta.
    """

    graph: InteractionGraph
    schedule: SampleSchedule
    model_kind: str
    d: int
    n_rounds: int
    n_trials: int
    seed: int
    noise_sigma: float = 1.0
    beta_star_mode: str = RANDOM_NORMAL
    beta_star: Optional[np.ndarray] = None
    risk_alignment: str = RAW
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        validate(self.graph)
        if self.d < 1 or self.n_rounds < 1 or self.n_trials < 1:
            raise ValueError("d, n_rounds, and n_trials must all be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        make_model(self.model_kind, self.d, self.noise_sigma)  # rejects bad kinds
        if self.risk_alignment not in (RAW, SIGN_ALIGNED):
            raise ValueError(f"unknown risk_alignment {self.risk_alignment!r}")
        if self.beta_star_mode == FIXED:
            if self.beta_star is None:
                raise ValueError("beta_star_mode 'fixed' needs a beta_star vector")
            vec = np.asarray(self.beta_star, dtype=float)
            if vec.shape != (self.d,):
                raise ValueError(f"beta_star must have shape ({self.d},)")
            object.__setattr__(self, "beta_star", vec)
        elif self.beta_star_mode == RANDOM_NORMAL:
            if self.beta_star is not None:
                raise ValueError("beta_star given but mode is random_normal")
        else:
            raise ValueError(f"unknown beta_star_mode {self.beta_star_mode!r}")
        self.schedule.validate_for(self.graph, self.d, self.n_rounds)

    def model(self) -> LossModel:
        return make_model(self.model_kind, self.d, self.noise_sigma)

    def ground_truth(self) -> np.ndarray:
        if self.beta_star_mode == FIXED:
            return np.array(self.beta_star, dtype=float)
        gen = substream(self.seed, DOMAIN_BETA_STAR, 0, 0, 0)
        return gen.standard_normal(self.d)


@dataclass(frozen=True)
class EnsembleState:
    """All node parameters after cycle t of one trial."""

    t: int
    beta: dict[NodeId, np.ndarray]
    beta_star: np.ndarray


@dataclass(frozen=True, eq=False)
class RiskSeries:
    """Per-(round, learner) interactive and benchmark risks."""

    learners: tuple[NodeId, ...]
    n_rounds: int
    r: dict[tuple[int, NodeId], float]
    r_star: dict[tuple[int, NodeId], float]
    ratio: dict[tuple[int, NodeId], float]
    r_se: dict[tuple[int, NodeId], float]
    rstar_se: dict[tuple[int, NodeId], float]
    n_ok_trials: int
    n_failed_trials: int


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    """Deterministic orientation: largest-magnitude entry positive."""
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def _quadratic_ls_start(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Warm start for the single-index kind from its own data.

    E[y x xT] = ||b||^2 I + 2 b bT under the standard normal design, so
    the top eigenvector of the empirical version points along the index
    and E[y] = ||b||^2 recovers the length. The loss is even in b, so
    the two signs tie on expected loss; orientation is canonicalized.
    """
    n = len(y)
    moment = (X.T * y) @ X / n
    moment = 0.5 * (moment + moment.T)
    _, vecs = np.linalg.eigh(moment)
    direction = _canonical_sign(vecs[:, -1])
    scale = math.sqrt(max(float(np.mean(y)), 1e-12))
    return scale * direction


def _aligned_average(params: list[np.ndarray], weights: list[float]) -> np.ndarray:
    """Weighted average after flipping each vector toward the heaviest
    one; two in-neighbors sitting in opposite sign basins would
    otherwise cancel, and either basin generates the same data law."""
    ref = params[int(np.argmax(weights))]
    acc = np.zeros_like(ref)
    for p, w in zip(params, weights):
        acc += w * (-p if float(p @ ref) < 0 else p)
    return acc / float(sum(weights))


def _squared_error(beta_hat: np.ndarray, beta_star: np.ndarray, aligned: bool) -> float:
    raw = float(np.sum((beta_hat - beta_star) ** 2))
    if not aligned:
        return raw
    return min(raw, float(np.sum((beta_hat + beta_star) ** 2)))


def _fit_params(
    model: LossModel,
    X: np.ndarray,
    y: np.ndarray,
    opts: SolverOptions,
    warm_start: Optional[np.ndarray],
) -> np.ndarray:
    result = fit(model, Dataset(X=X, y=y), opts, warm_start=warm_start)
    if not result.converged:
        raise NoConvergence(
            f"solver stopped at gradient norm {result.grad_norm:.3e} "
            f"after {result.iterations} iterations"
        )
    return result.beta_hat


def init_round(config: SimConfig, trial: int) -> EnsembleState:
    """Round-0 state: natural sources carry the truth, every other node
    fits its own fresh draw from the true model."""
    model = config.model()
    beta_star = config.ground_truth()
    single_index = config.model_kind == SINGLE_INDEX
    beta: dict[NodeId, np.ndarray] = {}
    for v in range(config.graph.n_nodes):
        if v in config.graph.nature_set:
            beta[v] = beta_star.copy()
            continue
        n0 = config.schedule.init_count(v)
        gen = substream(config.seed, DOMAIN_INIT, trial, 0, v)
        X = model.draw_covariates(gen, n0)
        u = model.draw_noise(gen, n0)
        y = model.sample(beta_star, X, u)
        warm = _quadratic_ls_start(X, y) if single_index else None
        beta[v] = _fit_params(model, X, y, config.solver, warm)
    return EnsembleState(t=0, beta=beta, beta_star=beta_star)


def _edge_draws(config, state, trial, t, model):
    """Per-edge datasets for round t, keyed by edge, drawn from each
    source's current parameters."""
    graph = config.graph
    sched = config.schedule
    out: dict[tuple[NodeId, NodeId], tuple[np.ndarray, np.ndarray]] = {}
    if sched.sharing_mode == BROADCAST:
        for src in range(graph.n_nodes):
            outs = graph.out_neighbors[src]
            if not outs:
                continue
            n_src = sched.source_draw_count(graph, t, src)
            gen = substream(config.seed, DOMAIN_SOURCE, trial, t, src)
            X = model.draw_covariates(gen, n_src)
            u = model.draw_noise(gen, n_src)
            y = model.sample(state.beta[src], X, u)
            for dst in outs:
                n_e = sched.edge_count(t, (src, dst))
                out[(src, dst)] = (X[:n_e], y[:n_e])
        return out
    for idx, (src, dst) in enumerate(graph.edges):
        n_e = sched.edge_count(t, (src, dst))
        gen = substream(config.seed, DOMAIN_EDGE, trial, t, idx)
        X = model.draw_covariates(gen, n_e)
        u = model.draw_noise(gen, n_e)
        y = model.sample(state.beta[src], X, u)
        out[(src, dst)] = (X, y)
    return out


def step(
    state: EnsembleState,
    config: SimConfig,
    trial: int,
    audit: Optional[dict] = None,
) -> EnsembleState:
    """One interaction cycle: ship per-edge synthetic datasets, refit
    every learner on its pooled in-edge data, freeze everything else.

    Passing an `audit` dict (linear kind only) fills it with the
    per-edge Gram matrices and per-learner noise shifts of this round,
    enough to reconstruct the exact parameter-transfer identity.
    """
    if audit is not None and config.model_kind != "linear":
        raise ValueError("the transfer audit is defined for the linear kind")
    t = state.t + 1
    model = config.model()
    graph = config.graph
    single_index = config.model_kind == SINGLE_INDEX
    draws = _edge_draws(config, state, trial, t, model)
    if audit is not None:
        audit["grams"] = {e: X.T @ X for e, (X, _) in draws.items()}
        audit["shift"] = {}
    beta = dict(state.beta)
    for v in graph.learners:
        parts = [draws[(s, v)] for s in graph.in_neighbors[v]]
        X = np.vstack([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        warm = None
        if single_index:
            weights = [
                float(config.schedule.edge_count(t, (s, v)))
                for s in graph.in_neighbors[v]
            ]
            warm = _aligned_average(
                [state.beta[s] for s in graph.in_neighbors[v]], weights
            )
        beta[v] = _fit_params(model, X, y, config.solver, warm)
        if audit is not None:
            resid = np.concatenate(
                [
                    yp - Xp @ state.beta[s]
                    for s, (Xp, yp) in zip(graph.in_neighbors[v], parts)
                ]
            )
            audit["shift"][v] = np.linalg.solve(X.T @ X, X.T @ resid)
    return EnsembleState(t=t, beta=beta, beta_star=state.beta_star)


def oracle_fit(
    counts: dict[NodeId, int],
    config: SimConfig,
    trial: int,
    t: int,
    beta_star: np.ndarray,
) -> dict[NodeId, np.ndarray]:
    """Benchmark fits: same pooled sample counts, fresh data from the
    true model."""
    model = config.model()
    single_index = config.model_kind == SINGLE_INDEX
    out: dict[NodeId, np.ndarray] = {}
    for v in sorted(counts):
        gen = substream(config.seed, DOMAIN_ORACLE, trial, t, v)
        X = model.draw_covariates(gen, counts[v])
        u = model.draw_noise(gen, counts[v])
        y = model.sample(beta_star, X, u)
        warm = _quadratic_ls_start(X, y) if single_index else None
        out[v] = _fit_params(model, X, y, config.solver, warm)
    return out


def _trial_errors(config: SimConfig, trial: int):
    """Squared parameter errors of one trial: (ok, interactive, oracle),
    both arrays shaped (n_rounds, n_learners)."""
    graph = config.graph
    learners = graph.learners
    T = config.n_rounds
    sq = np.zeros((T, len(learners)))
    sq_star = np.zeros((T, len(learners)))
    aligned = (
        config.risk_alignment == SIGN_ALIGNED and config.model_kind == SINGLE_INDEX
    )
    try:
        state = init_round(config, trial)
        for t in range(1, T + 1):
            state = step(state, config, trial)
            counts = {
                v: config.schedule.pool_count(graph, t, v) for v in learners
            }
            bench = oracle_fit(counts, config, trial, t, state.beta_star)
            for j, v in enumerate(learners):
                sq[t - 1, j] = _squared_error(state.beta[v], state.beta_star, aligned)
                sq_star[t - 1, j] = _squared_error(bench[v], state.beta_star, aligned)
    except (ModelError, NoConvergence):
        return False, sq, sq_star
    return True, sq, sq_star


def _trial_worker(args):
    return _trial_errors(*args)


def run_monte_carlo(config: SimConfig, threads: int = 1) -> RiskSeries:
    """All trials, reduced in ascending trial order regardless of the
    execution schedule, so any thread count reproduces the serial bytes."""
    jobs = [(config, trial) for trial in range(config.n_trials)]
    if threads <= 1:
        results = [_trial_errors(config, trial) for _, trial in jobs]
    else:
        chunk = max(1, config.n_trials // (threads * 4))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_trial_worker, jobs, chunksize=chunk))
    ok_mask = [ok for ok, _, _ in results]
    n_failed = ok_mask.count(False)
    if n_failed > 0.01 * config.n_trials:
        raise TooManyFailedTrials(
            f"{n_failed} of {config.n_trials} trials failed (limit 1%)"
        )
    n_ok = config.n_trials - n_failed
    stacked = np.stack([sq for ok, sq, _ in results if ok])
    stacked_star = np.stack([sq for ok, _, sq in results if ok])
    learners = config.graph.learners
    r_mean = stacked.mean(axis=0)
    rstar_mean = stacked_star.mean(axis=0)
    if n_ok > 1:
        r_se = stacked.std(axis=0, ddof=1) / math.sqrt(n_ok)
        rstar_se = stacked_star.std(axis=0, ddof=1) / math.sqrt(n_ok)
    else:
        r_se = np.full_like(r_mean, np.nan)
        rstar_se = np.full_like(r_mean, np.nan)
    r: dict[tuple[int, NodeId], float] = {}
    r_star: dict[tuple[int, NodeId], float] = {}
    ratio: dict[tuple[int, NodeId], float] = {}
    se: dict[tuple[int, NodeId], float] = {}
    se_star: dict[tuple[int, NodeId], float] = {}
    for t in range(1, config.n_rounds + 1):
        for j, v in enumerate(learners):
            key = (t, v)
            r[key] = float(r_mean[t - 1, j])
            r_star[key] = float(rstar_mean[t - 1, j])
            ratio[key] = (
                r[key] / r_star[key] if r_star[key] > 0.0 else float("nan")
            )
            se[key] = float(r_se[t - 1, j])
            se_star[key] = float(rstar_se[t - 1, j])
    return RiskSeries(
        learners=learners,
        n_rounds=config.n_rounds,
        r=r,
        r_star=r_star,
        ratio=ratio,
        r_se=se,
        rstar_se=se_star,
        n_ok_trials=n_ok,
        n_failed_trials=n_failed,
    )


def _error_vector_trial(config: SimConfig, trial: int, node: NodeId):
    try:
        state = init_round(config, trial)
        for _ in range(config.n_rounds):
            state = step(state, config, trial)
    except (ModelError, NoConvergence):
        return None
    return state.beta[node] - state.beta_star


def _error_vector_worker(args):
    return _error_vector_trial(*args)


def final_errors(config: SimConfig, node: NodeId, threads: int = 1) -> np.ndarray:
    """Final-round parameter error vectors of one node, one row per
    successful trial, reduced in ascending trial order."""
    jobs = [(config, trial, node) for trial in range(config.n_trials)]
    if threads <= 1:
        results = [_error_vector_trial(*job) for job in jobs]
    else:
        chunk = max(1, config.n_trials // (threads * 4))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_error_vector_worker, jobs, chunksize=chunk))
    n_failed = sum(1 for r in results if r is None)
    if n_failed > 0.01 * config.n_trials:
        raise TooManyFailedTrials(
            f"{n_failed} of {config.n_trials} trials failed (limit 1%)"
        )
    return np.stack([r for r in results if r is not None])


def recursion_residuals(config: SimConfig, trial: int = 0) -> np.ndarray:
    """Max-norm residual per round of the exact linear transfer identity
    (new stacked parameters vs transfer times old plus noise shift)."""
    if config.model_kind != "linear":
        raise ValueError("the transfer identity holds for the linear kind")
    graph = config.graph
    k, d = graph.n_nodes, config.d
    out = np.zeros(config.n_rounds)
    state = init_round(config, trial)
    for t in range(1, config.n_rounds + 1):
        audit: dict = {}
        new_state = step(state, config, trial, audit=audit)
        transfer = realized_transfer(graph, audit["grams"], t, d)
        prev = np.concatenate([state.beta[v] for v in range(k)])
        shift = np.zeros(k * d)
        for v, w in audit["shift"].items():
            shift[v * d : (v + 1) * d] = w
        predicted = transfer @ prev + shift
        realized = np.concatenate([new_state.beta[v] for v in range(k)])
        out[t - 1] = float(np.abs(realized - predicted).max())
        state = new_state
    return out
