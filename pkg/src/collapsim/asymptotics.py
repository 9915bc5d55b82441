"""Large-sample covariance recursion, trace-ratio criterion, and bounds.

In the large-sample limit the stacked parameter errors of all K nodes
are jointly Gaussian with a dK x dK covariance that obeys a one-round
recursion: mix the previous covariance through the round's transition
matrix (blockwise, scaled by the round-total ratio) and add the fresh
noise injected by this round's refits. Every block stays a scalar
multiple of the single-fit covariance, so each learner's health is
summarized by the trace ratio of its diagonal block against the
single-fit trace: bounded ratio means oracle-comparable risk, divergent
ratio is collapse.

The bounds functions certify divergence or boundedness without running
the recursion to huge horizons: they sandwich the trace ratio using
only chain products of transition matrices and proportion extremes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    BROADCAST,
    DimensionMismatch,
    SampleSchedule,
    TransitionMatrix,
)
from .graphs import CollapsePartition, InteractionGraph, NodeId, classify, validate

Edge = tuple[NodeId, NodeId]


class ZeroProportion(ValueError):
    pass


@dataclass(frozen=True)
class LimitProportions:
    """Limiting sample-count fractions of one run configuration.

    p0 holds each initially-fitted node's share of the round-0 total;
    edge_frac holds each (round, edge) share of that round's total;
    totals are the relative round masses (only their ratios matter);
    overlap holds the shared-data fraction q for ordered learner pairs
    (diagonal included). alpha_floor is the smallest stored fraction.
    """

    graph: InteractionGraph
    n_rounds: int
    p0: dict[NodeId, float]
    edge_frac: dict[tuple[int, NodeId, NodeId], float]
    totals: tuple[float, ...]
    overlap: dict[tuple[int, NodeId, NodeId], float]
    alpha_floor: float

    def __post_init__(self):
        for val in list(self.p0.values()) + list(self.edge_frac.values()) + list(
            self.overlap.values()
        ):
            if val < 0:
                raise ZeroProportion("proportions must be non-negative")
        positives = [v for v in list(self.p0.values()) + list(self.edge_frac.values())]
        if positives and min(positives) <= 0:
            raise ZeroProportion("stored proportions must be positive")

    @classmethod
    def from_schedule(
        cls, graph: InteractionGraph, schedule: SampleSchedule, n_rounds: int
    ) -> "LimitProportions":
        """Derive the limit fractions of a concrete schedule, rounds 1..n_rounds."""
        validate(graph)
        totals = [float(schedule.round_total(graph, t)) for t in range(n_rounds + 1)]
        p0 = {
            v: schedule.init_count(v) / totals[0]
            for v in range(graph.n_nodes)
            if v not in graph.nature_set
        }
        edge_frac: dict[tuple[int, NodeId, NodeId], float] = {}
        overlap: dict[tuple[int, NodeId, NodeId], float] = {}
        broadcast = schedule.sharing_mode == BROADCAST
        for t in range(1, n_rounds + 1):
            for s, v in graph.edges:
                edge_frac[(t, s, v)] = schedule.edge_count(t, (s, v)) / totals[t]
            for i in graph.learners:
                for j in graph.learners:
                    if j < i:
                        continue
                    if i == j:
                        q = sum(edge_frac[(t, s, i)] for s in graph.in_neighbors[i])
                    elif broadcast:
                        common = set(graph.in_neighbors[i]) & set(
                            graph.in_neighbors[j]
                        )
                        q = sum(
                            min(
                                schedule.edge_count(t, (s, i)),
                                schedule.edge_count(t, (s, j)),
                            )
                            / totals[t]
                            for s in sorted(common)
                        )
                    else:
                        q = 0.0
                    if q:
                        overlap[(t, i, j)] = q
        fractions = list(p0.values()) + list(edge_frac.values())
        floor = min(fractions) if fractions else 1.0
        return cls(
            graph=graph,
            n_rounds=n_rounds,
            p0=p0,
            edge_frac=edge_frac,
            totals=tuple(totals),
            overlap=overlap,
            alpha_floor=floor,
        )

    def p_bar_0(self, node: NodeId) -> float:
        if node not in self.p0:
            raise ZeroProportion(f"node {node} has no round-0 mass")
        return self.p0[node]

    def p_bar_edge(self, t: int, edge: Edge) -> float:
        key = (t, edge[0], edge[1])
        if key not in self.edge_frac:
            raise ZeroProportion(f"no fraction stored for round {t} edge {edge}")
        return self.edge_frac[key]

    def b(self, t: int, s: int) -> float:
        """Round-total ratio n_t/n_s; zero when round s generated nothing
        (it then only ever multiplies a zero covariance)."""
        if self.totals[s] == 0.0:
            return 0.0
        return self.totals[t] / self.totals[s]

    def q_overlap(self, t: int, i: NodeId, j: NodeId) -> float:
        a, b = (i, j) if i <= j else (j, i)
        return self.overlap.get((t, a, b), 0.0)

    def in_sum(self, t: int, node: NodeId) -> float:
        """Total in-edge fraction a learner trains on at round t."""
        return sum(self.p_bar_edge(t, (s, node)) for s in self.graph.in_neighbors[node])


@dataclass(frozen=True)
class CovarianceState:
    """Stacked dK x dK parameter covariance after round t."""

    t: int
    cov: np.ndarray

    def check(self, k: int, d: int) -> None:
        cov = self.cov
        if cov.shape != (k * d, k * d):
            raise DimensionMismatch(f"covariance shape {cov.shape} != {(k * d,) * 2}")
        scale = float(np.abs(cov).max()) if cov.size else 0.0
        assert np.allclose(cov, cov.T, atol=1e-10 * max(1.0, scale))
        if scale > 0.0:
            floor = -1e-9 * float(np.linalg.norm(cov, 2))
            assert float(np.linalg.eigvalsh(cov).min()) >= floor

    def block(self, i: NodeId, j: NodeId, d: int) -> np.ndarray:
        return self.cov[i * d : (i + 1) * d, j * d : (j + 1) * d]


def limit_transition(
    graph: InteractionGraph, props: LimitProportions, t: int
) -> TransitionMatrix:
    """Round-t transition matrix built from limit fractions (identical to
    the schedule-count version, just normalized differently)."""
    k = graph.n_nodes
    P = np.zeros((k, k))
    for v in range(k):
        ins = graph.in_neighbors[v]
        if not ins:
            P[v, v] = 1.0
            continue
        w = np.array([props.p_bar_edge(t, (s, v)) for s in ins])
        P[v, list(ins)] = w / w.sum()
    return TransitionMatrix(t=t, P=P)


def initial_covariance(
    graph: InteractionGraph, props: LimitProportions, v_star: np.ndarray
) -> CovarianceState:
    """Round-0 covariance: each initially-fitted node carries the
    single-fit covariance inflated by its inverse round-0 share; natural
    sources carry exactly zero; no cross-node correlation."""
    v_star = np.asarray(v_star, dtype=float)
    d = v_star.shape[0]
    k = graph.n_nodes
    cov = np.zeros((k * d, k * d))
    for v in range(k):
        if v in graph.nature_set:
            continue
        p = props.p_bar_0(v)
        if p <= 0:
            raise ZeroProportion(f"round-0 share of node {v} must be positive")
        cov[v * d : (v + 1) * d, v * d : (v + 1) * d] = v_star / p
    return CovarianceState(t=0, cov=cov)


def round_noise_cov(
    graph: InteractionGraph,
    props: LimitProportions,
    v_star: np.ndarray,
    t: int,
) -> np.ndarray:
    """Fresh-noise covariance injected by the round-t refits.

    Learner pair (i, j) receives their shared-data fraction divided by
    the product of their total in-fractions, times the single-fit
    covariance; pairs involving a non-learning node receive zero.
    """
    if t < 1:
        raise ValueError(f"fresh noise exists for rounds t >= 1, got {t}")
    v_star = np.asarray(v_star, dtype=float)
    d = v_star.shape[0]
    k = graph.n_nodes
    out = np.zeros((k * d, k * d))
    learner_set = list(graph.learners)
    sums = {}
    for v in learner_set:
        s = props.in_sum(t, v)
        if s <= 0:
            raise ZeroProportion(f"learner {v} has zero in-fraction at round {t}")
        sums[v] = s
    for i in learner_set:
        for j in learner_set:
            q = props.q_overlap(t, i, j)
            if q == 0.0:
                continue
            out[i * d : (i + 1) * d, j * d : (j + 1) * d] = (
                q / (sums[i] * sums[j])
            ) * v_star
    return out


def recurse_covariance(
    prev: CovarianceState,
    p_bar: TransitionMatrix,
    b_ratio: float,
    round_noise: np.ndarray,
) -> CovarianceState:
    """One covariance step: blockwise mixing through the transition
    matrix, scaled by the round-total ratio, plus the fresh noise."""
    if b_ratio < 0:
        raise ValueError("round-total ratio must be non-negative")
    P = p_bar.P
    k = P.shape[0]
    n = prev.cov.shape[0]
    if n % k != 0:
        raise DimensionMismatch(
            f"covariance size {n} is not a multiple of node count {k}"
        )
    d = n // k
    round_noise = np.asarray(round_noise, dtype=float)
    if round_noise.shape != (n, n):
        raise DimensionMismatch(
            f"noise matrix shape {round_noise.shape} != {(n, n)}"
        )
    blocks = prev.cov.reshape(k, d, k, d)
    mixed = np.einsum("ik,kalb,jl->iajb", P, blocks, P, optimize=True)
    cov = b_ratio * mixed.reshape(n, n) + round_noise
    cov = 0.5 * (cov + cov.T)
    return CovarianceState(t=prev.t + 1, cov=cov)


def covariance_series(
    graph: InteractionGraph,
    props: LimitProportions,
    v_star: np.ndarray,
    n_rounds: int,
) -> list[CovarianceState]:
    """States for rounds 0..n_rounds via the recursion."""
    validate(graph)
    states = [initial_covariance(graph, props, v_star)]
    for t in range(1, n_rounds + 1):
        P = limit_transition(graph, props, t)
        noise = round_noise_cov(graph, props, v_star, t)
        states.append(
            recurse_covariance(states[-1], P, props.b(t, t - 1), noise)
        )
    return states


def trace_ratio_series(
    graph: InteractionGraph,
    props: LimitProportions,
    v_star: np.ndarray,
    n_rounds: int,
) -> dict[tuple[int, NodeId], float]:
    """Per-learner trace ratios for rounds 1..n_rounds.

    The ratio compares a learner's asymptotic risk against the
    single-fit risk; a bounded series means oracle-comparable accuracy,
    divergence is collapse.
    """
    if n_rounds < 1:
        raise ValueError("need at least one round")
    v_star = np.asarray(v_star, dtype=float)
    d = v_star.shape[0]
    denom = float(np.trace(v_star))
    out: dict[tuple[int, NodeId], float] = {}
    for state in covariance_series(graph, props, v_star, n_rounds)[1:]:
        for v in graph.learners:
            out[(state.t, v)] = float(np.trace(state.block(v, v, d))) / denom
    return out


def trace_bounds(
    graph: InteractionGraph,
    props: LimitProportions,
    v_star: np.ndarray,
    n_rounds: int,
    node: NodeId,
) -> tuple[float, float]:
    """Sandwich on the trace of one learner's round-T diagonal block.

    Both bounds are sums over rounds of chain-product row masses against
    proportion aggregates: the lower bound divides each round's mass by
    the total learner in-fraction, the upper by the smallest one; the
    round-0 terms run over initially-fitted nodes only, since natural
    sources carry no round-0 noise. Returned as trace values.
    """
    if node not in set(graph.learners):
        raise ValueError(f"node {node} is not a learner")
    v_star = np.asarray(v_star, dtype=float)
    T = n_rounds
    k = graph.n_nodes
    learners = list(graph.learners)
    fitted = [v for v in range(k) if v not in graph.nature_set]
    transitions = [limit_transition(graph, props, t) for t in range(1, T + 1)]
    lower = 0.0
    upper = 0.0
    J = np.eye(k)
    # walk t = T down to 1; at each step J equals the chain product of
    # rounds t+1..T (identity at t = T)
    for t in range(T, 0, -1):
        mass = float(sum(J[node, v] for v in learners))
        s_vals = [props.in_sum(t, v) for v in learners]
        b = props.b(T, t)
        lower += b * mass * mass / sum(s_vals)
        upper += b * mass * mass / min(s_vals)
        J = J @ transitions[t - 1].P
    mass0 = float(sum(J[node, v] for v in fitted))
    if fitted and mass0 > 0.0:
        p0_vals = [props.p_bar_0(v) for v in fitted]
        b0 = props.b(T, 0)
        lower += b0 * mass0 * mass0 / sum(p0_vals)
        upper += b0 * mass0 * mass0 / min(p0_vals)
    tr = float(np.trace(v_star))
    return lower * tr, upper * tr


def predict_collapse(graph: InteractionGraph) -> dict[NodeId, str]:
    """Long-run outcome label per node from graph structure alone."""
    part: CollapsePartition = classify(graph)
    out: dict[NodeId, str] = {}
    for v in sorted(part.m_u):
        out[v] = "frozen"
    for v in sorted(part.m_l_c):
        out[v] = "collapses"
    for v in sorted(part.m_l_nc):
        out[v] = "bounded"
    return out
