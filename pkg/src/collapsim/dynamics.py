"""Sample schedules and per-round mixing operators.

Each round t >= 1 every learner pools the datasets arriving on its
in-edges and refits. The pooled least-squares update is linear in the
upstream parameters, so a round acts on the stacked parameter vector as
a block matrix: learner row blocks are Gram-weighted averages of their
in-neighbors, non-learning rows are identity. In the large-sample limit
the Gram weights concentrate on the sample-count fractions, giving a
row-stochastic K x K matrix per round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graphs import InteractionGraph, NodeId, node_label

Edge = tuple[NodeId, NodeId]

INDEPENDENT = "independent_per_edge"
BROADCAST = "broadcast_per_source"


class ScheduleError(ValueError):
    pass


class MissingScheduleEntry(ScheduleError, KeyError):
    pass


class DimensionMismatch(ValueError):
    pass


class SingularAggregateGram(np.linalg.LinAlgError, ValueError):
    pass


@dataclass(frozen=True)
class SampleSchedule:
    """Sample counts per round-0 node and per (round, edge).

    n0 gives the round-0 dataset size of every node that performs an
    initial fit (everything not flagged nature). For rounds t >= 1 an
    edge's count is resolved in order: exact (t, src, dst) override,
    then (src, dst) override, then the default. No default and no
    override is a MissingScheduleEntry.

    sharing_mode independent_per_edge draws a fresh dataset per out-edge;
    broadcast_per_source draws one dataset per source per round and every
    out-edge receives a prefix subset of it.
    """

    n0: dict[NodeId, int] = field(default_factory=dict)
    n_default: int | None = None
    edge_overrides: dict[Edge, int] = field(default_factory=dict)
    round_overrides: dict[tuple[int, NodeId, NodeId], int] = field(default_factory=dict)
    sharing_mode: str = INDEPENDENT

    def __post_init__(self):
        if self.sharing_mode not in (INDEPENDENT, BROADCAST):
            raise ScheduleError(f"unknown sharing_mode {self.sharing_mode!r}")
        for n in list(self.n0.values()) + list(self.edge_overrides.values()) + list(
            self.round_overrides.values()
        ):
            if int(n) < 1:
                raise ScheduleError("sample counts must be >= 1")
        if self.n_default is not None and int(self.n_default) < 1:
            raise ScheduleError("sample counts must be >= 1")

    @classmethod
    def constant(
        cls,
        graph: InteractionGraph,
        n_sample: int,
        n0: int | None = None,
        sharing_mode: str = INDEPENDENT,
    ) -> "SampleSchedule":
        """Same count on every edge every round; round-0 count n0 (default
        n_sample) on every non-nature node."""
        base = n_sample if n0 is None else n0
        init = {
            v: int(base) for v in range(graph.n_nodes) if v not in graph.nature_set
        }
        return cls(n0=init, n_default=int(n_sample), sharing_mode=sharing_mode)

    def init_count(self, node: NodeId) -> int:
        if node not in self.n0:
            raise MissingScheduleEntry(f"no round-0 count for {node_label(node)}")
        return int(self.n0[node])

    def edge_count(self, t: int, edge: Edge) -> int:
        if t < 1:
            raise ScheduleError(f"edge counts exist for rounds t >= 1, got t={t}")
        key = (t, edge[0], edge[1])
        if key in self.round_overrides:
            return int(self.round_overrides[key])
        if edge in self.edge_overrides:
            return int(self.edge_overrides[edge])
        if self.n_default is not None:
            return int(self.n_default)
        raise MissingScheduleEntry(
            f"no count for edge ({node_label(edge[0])},{node_label(edge[1])}) "
            f"at round {t} and no default"
        )

    def pool_count(self, graph: InteractionGraph, t: int, node: NodeId) -> int:
        """Total samples learner `node` trains on at round t."""
        return sum(self.edge_count(t, e) for e in graph.in_edges(node))

    def source_draw_count(self, graph: InteractionGraph, t: int, src: NodeId) -> int:
        """Rows drawn by one source at round t under broadcast sharing."""
        outs = [self.edge_count(t, (src, t2)) for t2 in graph.out_neighbors[src]]
        # parallel edges to the same target are forbidden, so out_neighbors
        # enumerates the out-edges exactly
        return max(outs) if outs else 0

    def round_total(self, graph: InteractionGraph, t: int) -> int:
        """Total fresh rows generated across the graph at round t."""
        if t == 0:
            return sum(
                self.init_count(v)
                for v in range(graph.n_nodes)
                if v not in graph.nature_set
            )
        if self.sharing_mode == BROADCAST:
            return sum(
                self.source_draw_count(graph, t, v) for v in range(graph.n_nodes)
            )
        return sum(self.edge_count(t, e) for e in graph.edges)

    def validate_for(self, graph: InteractionGraph, d: int, n_rounds: int) -> None:
        """Check every lookup needed for n_rounds rounds resolves and each
        learner's pool is at least d."""
        for v in range(graph.n_nodes):
            if v not in graph.nature_set:
                self.init_count(v)
        for t in range(1, n_rounds + 1):
            for v in graph.learners:
                if self.pool_count(graph, t, v) < d:
                    raise ScheduleError(
                        f"round {t} pool for {node_label(v)} smaller than d={d}"
                    )


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic population mixing matrix of one round."""

    t: int
    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        object.__setattr__(self, "P", P)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DimensionMismatch(f"transition matrix must be square, got {P.shape}")


def transition_matrix(
    graph: InteractionGraph, schedule: SampleSchedule, t: int
) -> TransitionMatrix:
    """Population-limit mixing matrix of round t >= 1.

    Learner rows hold in-edge sample fractions; rows of non-learning
    nodes are unit vectors on themselves (their parameters persist).
    """
    k = graph.n_nodes
    P = np.zeros((k, k))
    for v in range(k):
        ins = graph.in_neighbors[v]
        if not ins:
            P[v, v] = 1.0
            continue
        counts = np.array([schedule.edge_count(t, (s, v)) for s in ins], dtype=float)
        P[v, list(ins)] = counts / counts.sum()
    return TransitionMatrix(t=t, P=P)


def _as_matrix(m) -> np.ndarray:
    return np.asarray(m.P if isinstance(m, TransitionMatrix) else m, dtype=float)


def chain_product(mats: Sequence, k: int | None = None) -> np.ndarray:
    """Multiply per-round matrices across a window, latest round leftmost.

    `mats` is ordered by round (earliest first), matching how a window
    of rounds s+1..t is produced; the result is mats[-1] @ ... @ mats[0].
    An empty window is the identity, which needs k to fix the size.
    """
    if len(mats) == 0:
        if k is None:
            raise DimensionMismatch("empty chain needs an explicit dimension k")
        return np.eye(k)
    acc = _as_matrix(mats[0]).copy()
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise DimensionMismatch(f"chain factors must be square, got {acc.shape}")
    if k is not None and acc.shape[0] != k:
        raise DimensionMismatch(f"chain factor is {acc.shape[0]}x, expected {k}")
    for m in mats[1:]:
        nxt = _as_matrix(m)
        if nxt.shape != acc.shape:
            raise DimensionMismatch(
                f"chain factors disagree in shape: {nxt.shape} vs {acc.shape}"
            )
        acc = nxt @ acc
    return acc


def realized_transfer(
    graph: InteractionGraph,
    gram_blocks: Mapping[Edge, np.ndarray],
    t: int = 1,
    d: int | None = None,
) -> np.ndarray:
    """Exact one-round parameter transfer as a dK x dK block matrix.

    gram_blocks maps each edge to the d x d Gram matrix of the covariates
    shipped along it this round. A learner's row blocks are
    (sum of its in-edge Grams)^-1 @ (that edge's Gram); non-learning rows
    are identity blocks. At t=0 every node refits (or holds) its own
    draw, so the transfer is the identity.
    """
    if gram_blocks:
        first = np.asarray(next(iter(gram_blocks.values())))
        d = first.shape[0] if d is None else d
    if d is None:
        raise DimensionMismatch("need gram blocks or an explicit d")
    k = graph.n_nodes
    out = np.zeros((k * d, k * d))
    if t == 0:
        return np.eye(k * d)
    for e, g in gram_blocks.items():
        g = np.asarray(g, dtype=float)
        if g.shape != (d, d):
            raise DimensionMismatch(
                f"gram block for edge {e} has shape {g.shape}, expected {(d, d)}"
            )
    for v in range(k):
        ins = graph.in_neighbors[v]
        if not ins:
            out[v * d : (v + 1) * d, v * d : (v + 1) * d] = np.eye(d)
            continue
        blocks = []
        for s in ins:
            if (s, v) not in gram_blocks:
                raise MissingScheduleEntry(
                    f"no gram block for edge ({node_label(s)},{node_label(v)})"
                )
            blocks.append(np.asarray(gram_blocks[(s, v)], dtype=float))
        agg = np.sum(blocks, axis=0)
        try:
            solved = np.linalg.solve(agg, np.hstack(blocks))
        except np.linalg.LinAlgError as exc:
            raise SingularAggregateGram(
                f"aggregate gram of {node_label(v)} is singular"
            ) from exc
        for j, s in enumerate(ins):
            out[v * d : (v + 1) * d, s * d : (s + 1) * d] = solved[
                :, j * d : (j + 1) * d
            ]
    return out
