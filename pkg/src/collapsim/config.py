"""JSON run configuration: parsing, validation, and lossless re-emission.

One document drives every command. Node numbering in config files and
in all emitted artifacts is 1-based ("mu1" is node 1), matching the
labels the reports print; internally everything is 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Optional

from .dynamics import BROADCAST, INDEPENDENT, SampleSchedule
from .graphs import InteractionGraph, build_canonical, validate
from .models import KINDS

DEFAULT_GRAPH = "exp5"
DEFAULT_N_SAMPLE = 1000
DEFAULT_D = 5
DEFAULT_ROUNDS = 50
DEFAULT_TRIALS = 1000


class SchemaError(ValueError):
    """A config document violates the schema; message carries the key path."""


@dataclass(frozen=True)
class RunConfig:
    """Parsed and validated run configuration."""

    graph: InteractionGraph
    schedule: SampleSchedule
    model_kind: str
    d: int
    noise_sigma: float
    n_rounds: int
    n_trials: int
    seed: int
    risk_alignment: str
    beta_star: Optional[tuple[float, ...]]
    out_dir: str
    formats: tuple[str, ...]

    def to_jsonable(self) -> dict:
        """Plain-dict form that parses back to an equal RunConfig."""
        graph = {
            "nodes": self.graph.n_nodes,
            "edges": [[s + 1, v + 1] for s, v in self.graph.edges],
            "nature": [v + 1 for v in self.graph.nature],
        }
        schedule: dict[str, Any] = {"sharing_mode": self.schedule.sharing_mode}
        if self.schedule.n_default is not None:
            schedule["n_sample"] = self.schedule.n_default
        if self.schedule.n0:
            schedule["n0"] = [[v + 1, n] for v, n in sorted(self.schedule.n0.items())]
        if self.schedule.edge_overrides:
            schedule["edge_overrides"] = [
                [s + 1, v + 1, n]
                for (s, v), n in sorted(self.schedule.edge_overrides.items())
            ]
        if self.schedule.round_overrides:
            schedule["round_overrides"] = [
                [t, s + 1, v + 1, n]
                for (t, s, v), n in sorted(self.schedule.round_overrides.items())
            ]
        experiment: dict[str, Any] = {
            "n_rounds": self.n_rounds,
            "n_trials": self.n_trials,
            "seed": self.seed,
            "risk_alignment": self.risk_alignment,
        }
        if self.beta_star is not None:
            experiment["beta_star"] = list(self.beta_star)
        return {
            "graph": graph,
            "schedule": schedule,
            "model": {
                "kind": self.model_kind,
                "d": self.d,
                "noise_sigma": self.noise_sigma,
            },
            "experiment": experiment,
            "output": {"directory": self.out_dir, "formats": list(self.formats)},
        }


def _require_mapping(obj: Any, path: str) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"{path} must be an object")
    return obj


def _get_int(obj: dict, key: str, path: str, default=None, minimum=None):
    if key not in obj:
        if default is not None:
            return default
        raise SchemaError(f"{path}.{key} required")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise SchemaError(f"{path}.{key} must be an integer")
    if minimum is not None and val < minimum:
        raise SchemaError(f"{path}.{key} must be >= {minimum}")
    return val


def _get_number(obj: dict, key: str, path: str, default):
    val = obj.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise SchemaError(f"{path}.{key} must be a number")
    return float(val)


def _node_index(value: Any, n_nodes: int, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{path}: node references must be integers (1-based)")
    if not 1 <= value <= n_nodes:
        raise SchemaError(f"{path}: node {value} outside 1..{n_nodes}")
    return value - 1


def _parse_graph(doc: dict) -> InteractionGraph:
    spec = doc.get("graph", {"canonical": DEFAULT_GRAPH})
    spec = _require_mapping(spec, "graph")
    if "canonical" in spec:
        name = spec["canonical"]
        if not isinstance(name, str):
            raise SchemaError("graph.canonical must be a string")
        params = spec.get("params", [])
        if not isinstance(params, list):
            raise SchemaError("graph.params must be a list")
        return build_canonical(name, params)
    n_nodes = _get_int(spec, "nodes", "graph", minimum=1)
    raw_edges = spec.get("edges", [])
    if not isinstance(raw_edges, list):
        raise SchemaError("graph.edges must be a list")
    edges = []
    for i, item in enumerate(raw_edges):
        if not isinstance(item, list) or len(item) != 2:
            raise SchemaError(f"graph.edges[{i}] must be a [source, target] pair")
        edges.append(
            (
                _node_index(item[0], n_nodes, f"graph.edges[{i}]"),
                _node_index(item[1], n_nodes, f"graph.edges[{i}]"),
            )
        )
    raw_nature = spec.get("nature", [])
    if not isinstance(raw_nature, list):
        raise SchemaError("graph.nature must be a list")
    nature = [
        _node_index(v, n_nodes, f"graph.nature[{i}]")
        for i, v in enumerate(raw_nature)
    ]
    graph = InteractionGraph(n_nodes, edges, nature)
    validate(graph)
    return graph


def _parse_schedule(doc: dict, graph: InteractionGraph) -> SampleSchedule:
    spec = _require_mapping(doc.get("schedule", {}), "schedule")
    sharing = spec.get("sharing_mode", INDEPENDENT)
    if sharing not in (INDEPENDENT, BROADCAST):
        raise SchemaError(
            f"schedule.sharing_mode must be {INDEPENDENT!r} or {BROADCAST!r}"
        )
    n_sample = _get_int(spec, "n_sample", "schedule", default=DEFAULT_N_SAMPLE, minimum=1)
    k = graph.n_nodes
    n0: dict[int, int] = {
        v: n_sample for v in range(k) if v not in graph.nature_set
    }
    if "n0" in spec:
        if not isinstance(spec["n0"], list):
            raise SchemaError("schedule.n0 must be a list of [node, count] pairs")
        for i, item in enumerate(spec["n0"]):
            if not isinstance(item, list) or len(item) != 2:
                raise SchemaError(f"schedule.n0[{i}] must be a [node, count] pair")
            node = _node_index(item[0], k, f"schedule.n0[{i}]")
            count = item[1]
            if isinstance(count, bool) or not isinstance(count, int) or count < 1:
                raise SchemaError(f"schedule.n0[{i}]: count must be a positive integer")
            n0[node] = count
    edge_overrides: dict[tuple[int, int], int] = {}
    for i, item in enumerate(spec.get("edge_overrides", [])):
        if not isinstance(item, list) or len(item) != 3:
            raise SchemaError(
                f"schedule.edge_overrides[{i}] must be [source, target, count]"
            )
        s = _node_index(item[0], k, f"schedule.edge_overrides[{i}]")
        v = _node_index(item[1], k, f"schedule.edge_overrides[{i}]")
        if isinstance(item[2], bool) or not isinstance(item[2], int) or item[2] < 1:
            raise SchemaError(
                f"schedule.edge_overrides[{i}]: count must be a positive integer"
            )
        edge_overrides[(s, v)] = item[2]
    round_overrides: dict[tuple[int, int, int], int] = {}
    for i, item in enumerate(spec.get("round_overrides", [])):
        if not isinstance(item, list) or len(item) != 4:
            raise SchemaError(
                f"schedule.round_overrides[{i}] must be [round, source, target, count]"
            )
        t = item[0]
        if isinstance(t, bool) or not isinstance(t, int) or t < 1:
            raise SchemaError(
                f"schedule.round_overrides[{i}]: round must be a positive integer"
            )
        s = _node_index(item[1], k, f"schedule.round_overrides[{i}]")
        v = _node_index(item[2], k, f"schedule.round_overrides[{i}]")
        if isinstance(item[3], bool) or not isinstance(item[3], int) or item[3] < 1:
            raise SchemaError(
                f"schedule.round_overrides[{i}]: count must be a positive integer"
            )
        round_overrides[(t, s, v)] = item[3]
    return SampleSchedule(
        n0=n0,
        n_default=n_sample,
        edge_overrides=edge_overrides,
        round_overrides=round_overrides,
        sharing_mode=sharing,
    )


def parse_config(text: str) -> RunConfig:
    """Parse one JSON config document into a validated RunConfig."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SyntaxError(f"config is not valid JSON: {exc}") from exc
    doc = _require_mapping(doc, "config")
    graph = _parse_graph(doc)
    schedule = _parse_schedule(doc, graph)

    model = _require_mapping(doc.get("model", {}), "model")
    kind = model.get("kind", "linear")
    if kind not in KINDS:
        raise SchemaError(f"model.kind must be one of {sorted(KINDS)}")
    d = _get_int(model, "d", "model", default=DEFAULT_D, minimum=1)
    noise_sigma = _get_number(model, "noise_sigma", "model", 1.0)
    if noise_sigma < 0:
        raise SchemaError("model.noise_sigma must be >= 0")

    experiment = _require_mapping(doc.get("experiment", {}), "experiment")
    seed = _get_int(experiment, "seed", "experiment", minimum=0)
    n_rounds = _get_int(experiment, "n_rounds", "experiment", default=DEFAULT_ROUNDS, minimum=1)
    n_trials = _get_int(experiment, "n_trials", "experiment", default=DEFAULT_TRIALS, minimum=1)
    risk_alignment = experiment.get("risk_alignment", "raw")
    if risk_alignment not in ("raw", "sign_aligned"):
        raise SchemaError(
            "experiment.risk_alignment must be 'raw' or 'sign_aligned'"
        )
    beta_star = None
    if "beta_star" in experiment:
        raw = experiment["beta_star"]
        if (
            not isinstance(raw, list)
            or len(raw) != d
            or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in raw)
        ):
            raise SchemaError(f"experiment.beta_star must be a list of {d} numbers")
        beta_star = tuple(float(x) for x in raw)

    output = _require_mapping(doc.get("output", {}), "output")
    out_dir = output.get("directory", ".")
    if not isinstance(out_dir, str):
        raise SchemaError("output.directory must be a string")
    formats = output.get("formats", ["csv", "json"])
    if not isinstance(formats, list) or any(not isinstance(f, str) for f in formats):
        raise SchemaError("output.formats must be a list of strings")

    return RunConfig(
        graph=graph,
        schedule=schedule,
        model_kind=kind,
        d=d,
        noise_sigma=noise_sigma,
        n_rounds=n_rounds,
        n_trials=n_trials,
        seed=seed,
        risk_alignment=risk_alignment,
        beta_star=beta_star,
        out_dir=out_dir,
        formats=tuple(formats),
    )


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
