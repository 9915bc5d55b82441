"""Directed interaction graphs and the collapse taxonomy.

Nodes are models; an edge (source, target) means the target retrains on
data generated by the source each round. Nodes with no in-edges never
retrain: they are either exact natural data sources (flagged "nature")
or hold a frozen round-0 fit. The taxonomy splits the learning nodes by
whether any stable node can reach them, which is what separates bounded
estimation error from unbounded drift under repeated retraining.

Node ids are 0-based integers internally; all user-facing labels are
1-based strings "mu1".."muK".
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

NodeId = int


class GraphError(ValueError):
    """Base class for interaction-graph validation failures."""


class DuplicateEdge(GraphError):
    pass


class NatureNodeHasInEdge(GraphError):
    pass


class NodeIndexOutOfRange(GraphError):
    pass


class UnknownCanonicalName(GraphError):
    pass


class BadParams(GraphError):
    pass


def node_label(node: NodeId) -> str:
    """0-based node id -> 1-based display label."""
    return f"mu{node + 1}"


def label_to_node(label: str) -> NodeId:
    if not label.startswith("mu"):
        raise GraphError(f"bad node label {label!r}, expected 'mu<k>'")
    try:
        k = int(label[2:])
    except ValueError as exc:
        raise GraphError(f"bad node label {label!r}, expected 'mu<k>'") from exc
    if k < 1:
        raise GraphError(f"bad node label {label!r}, indices are 1-based")
    return k - 1


@dataclass(frozen=True)
class InteractionGraph:
    """Immutable digraph over K model nodes.

    Fields:
        n_nodes: node count K; nodes are 0..K-1.
        edges: directed (source, target) pairs, stored sorted. Self
            loops allowed; parallel duplicates are not (see validate).
        nature: nodes that emit exact ground-truth data forever. Must
            have in-degree 0.
    """

    n_nodes: int
    edges: tuple[tuple[NodeId, NodeId], ...]
    nature: tuple[NodeId, ...] = ()

    def __init__(
        self,
        n_nodes: int,
        edges: Iterable[Sequence[NodeId]] = (),
        nature: Iterable[NodeId] = (),
    ):
        object.__setattr__(self, "n_nodes", int(n_nodes))
        object.__setattr__(
            self, "edges", tuple(sorted((int(s), int(t)) for s, t in edges))
        )
        object.__setattr__(self, "nature", tuple(sorted({int(v) for v in nature})))

    @cached_property
    def in_neighbors(self) -> dict[NodeId, tuple[NodeId, ...]]:
        """Map target -> sorted tuple of sources feeding it."""
        nbrs: dict[NodeId, list[NodeId]] = {v: [] for v in range(self.n_nodes)}
        for s, t in self.edges:
            nbrs[t].append(s)
        return {v: tuple(sorted(ns)) for v, ns in nbrs.items()}

    @cached_property
    def out_neighbors(self) -> dict[NodeId, tuple[NodeId, ...]]:
        nbrs: dict[NodeId, list[NodeId]] = {v: [] for v in range(self.n_nodes)}
        for s, t in self.edges:
            nbrs[s].append(t)
        return {v: tuple(sorted(set(ns))) for v, ns in nbrs.items()}

    @cached_property
    def learners(self) -> tuple[NodeId, ...]:
        """Nodes with at least one in-edge, sorted."""
        return tuple(v for v in range(self.n_nodes) if self.in_neighbors[v])

    @cached_property
    def nature_set(self) -> frozenset[NodeId]:
        return frozenset(self.nature)

    def in_edges(self, node: NodeId) -> tuple[tuple[NodeId, NodeId], ...]:
        """Sorted in-edges of one node as (source, target) pairs."""
        return tuple((s, node) for s in self.in_neighbors[node])


def validate(graph: InteractionGraph) -> None:
    """Check structural well-formedness; raise a typed GraphError if broken.

    Raises:
        NodeIndexOutOfRange: an edge endpoint or nature flag is outside
            0..K-1, or K < 1.
        DuplicateEdge: the same (source, target) pair appears twice.
        NatureNodeHasInEdge: a node flagged nature has an in-edge.
    """
    k = graph.n_nodes
    if k < 1:
        raise NodeIndexOutOfRange(f"graph needs at least one node, got K={k}")
    for s, t in graph.edges:
        if not (0 <= s < k and 0 <= t < k):
            raise NodeIndexOutOfRange(
                f"edge ({node_label(s)},{node_label(t)}) outside 1..{k}"
            )
    for v in graph.nature:
        if not (0 <= v < k):
            raise NodeIndexOutOfRange(f"nature flag {v} outside 0..{k - 1}")
    seen: set[tuple[NodeId, NodeId]] = set()
    for e in graph.edges:
        if e in seen:
            raise DuplicateEdge(
                f"edge ({node_label(e[0])},{node_label(e[1])}) listed twice"
            )
        seen.add(e)
    for s, t in graph.edges:
        if t in graph.nature_set:
            raise NatureNodeHasInEdge(
                f"nature node {node_label(t)} has in-edge from {node_label(s)}"
            )


def reachable_from(
    graph: InteractionGraph, sources: Iterable[NodeId]
) -> frozenset[NodeId]:
    """Nodes reachable from `sources` by a directed path of length >= 1.

    A source is included only if some cycle returns to it; mere
    membership in `sources` does not count as reachability.
    """
    frontier: list[NodeId] = []
    reached: set[NodeId] = set()
    for s in set(sources):
        for t in graph.out_neighbors[s]:
            if t not in reached:
                reached.add(t)
                frontier.append(t)
    while frontier:
        v = frontier.pop()
        for t in graph.out_neighbors[v]:
            if t not in reached:
                reached.add(t)
                frontier.append(t)
    return frozenset(reached)


@dataclass(frozen=True)
class CollapsePartition:
    """Disjoint split of the node set by long-run estimation behavior.

    m_u: non-learning nodes (no in-edges): exact sources or frozen fits.
    m_l: learning nodes.
    m_l_inf: learners no non-learning node can reach; the seed of drift.
    m_l_c: m_l_inf plus every learner reachable from it; these drift
        without bound relative to an oracle trained on fresh data.
    m_l_nc: remaining learners; their error stays comparable to oracle.
    """

    m_u: frozenset[NodeId]
    m_l: frozenset[NodeId]
    m_l_inf: frozenset[NodeId]
    m_l_c: frozenset[NodeId]
    m_l_nc: frozenset[NodeId]

    def label_map(self) -> dict[str, str]:
        """Per-node outcome labels keyed by display label."""
        out: dict[str, str] = {}
        for v in sorted(self.m_u):
            out[node_label(v)] = "frozen"
        for v in sorted(self.m_l_c):
            out[node_label(v)] = "collapses"
        for v in sorted(self.m_l_nc):
            out[node_label(v)] = "bounded"
        return out


def classify(graph: InteractionGraph) -> CollapsePartition:
    """Compute the collapse partition of a validated graph."""
    validate(graph)
    all_nodes = frozenset(range(graph.n_nodes))
    m_l = frozenset(graph.learners)
    m_u = all_nodes - m_l
    stabilized = reachable_from(graph, m_u)
    m_l_inf = m_l - stabilized
    m_l_c = m_l_inf | (m_l & reachable_from(graph, m_l_inf))
    m_l_nc = m_l - m_l_c
    return CollapsePartition(
        m_u=m_u, m_l=m_l, m_l_inf=m_l_inf, m_l_c=m_l_c, m_l_nc=m_l_nc
    )


def _pairs_below_diagonal(k: int) -> list[tuple[int, int]]:
    return [(a, b) for b in range(k) for a in range(b)]


def _onediff_base() -> list[tuple[int, int]]:
    # five-node feedforward hierarchy plus one natural source into node 2
    edges = _pairs_below_diagonal(5)
    edges.append((5, 2))
    return edges


_CANONICAL: Mapping[str, tuple[int, tuple[tuple[int, int], ...], tuple[int, ...]]] = {
    # name -> (K, edges, nature), all 0-based
    "self_loop": (1, ((0, 0),), ()),
    "two_node": (2, ((0, 1), (1, 1)), (0,)),
    "exp5": (5, ((0, 1), (1, 4), (2, 3), (2, 4), (3, 2)), (0,)),
    "exm3": (
        5,
        ((0, 1), (2, 3), (2, 4), (3, 2), (3, 4), (4, 1), (4, 2), (4, 3)),
        (0,),
    ),
    "exp8": (
        8,
        (
            (0, 2),
            (1, 3),
            (2, 3),
            (3, 7),
            (4, 5),
            (4, 6),
            (5, 4),
            (5, 6),
            (6, 4),
            (6, 5),
            (6, 7),
        ),
        (0, 1),
    ),
    "fig2": (6, ((0, 2), (1, 2), (1, 4), (2, 5), (3, 3), (3, 4)), (0, 1)),
    "onediff_left": (6, tuple(_onediff_base()), (5,)),
    "onediff_right": (6, tuple(_onediff_base() + [(1, 0)]), (5,)),
}


def build_canonical(name: str, params: Sequence[int] = ()) -> InteractionGraph:
    """Construct one of the named reference graphs.

    "accumulating" takes one parameter, the node count, and wires every
    lower-numbered node into every higher-numbered one with node 0 as
    the single natural source. All other names take no parameters.

    Raises:
        UnknownCanonicalName: name not in the catalog.
        BadParams: parameter list has the wrong arity or value.
    """
    params = tuple(int(p) for p in params)
    if name == "accumulating":
        if len(params) != 1:
            raise BadParams("accumulating takes exactly one parameter (node count)")
        k = params[0]
        if k < 1:
            raise BadParams("accumulating node count must be >= 1")
        g = InteractionGraph(k, _pairs_below_diagonal(k), nature=(0,) if k > 1 else ())
        validate(g)
        return g
    if name not in _CANONICAL:
        known = ", ".join(sorted(_CANONICAL) + ["accumulating"])
        raise UnknownCanonicalName(f"unknown canonical graph {name!r}; known: {known}")
    if params:
        raise BadParams(f"canonical graph {name!r} takes no parameters")
    k, edges, nature = _CANONICAL[name]
    g = InteractionGraph(k, edges, nature)
    validate(g)
    return g


def canonical_names() -> tuple[str, ...]:
    return tuple(sorted(_CANONICAL)) + ("accumulating",)
