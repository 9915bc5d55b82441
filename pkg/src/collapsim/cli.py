"""Command-line entry point.

Subcommands: classify (graph partition report), simulate (Monte Carlo
risk-ratio CSV), asymptotics (trace-ratio and bounds CSV), verify
(empirical-vs-recursion cross-checks). Every emitted byte is a
deterministic function of the config document and the seed.

Exit codes: 0 success, 2 config problems, 3 simulation failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import asymptotics as asym
from .config import RunConfig, SchemaError, load_config
from .dynamics import SampleSchedule
from .graphs import build_canonical, classify, node_label
from .models import ModelError
from .simulate import (
    FIXED,
    RANDOM_NORMAL,
    SimConfig,
    SimulationError,
    final_errors,
    recursion_residuals,
    run_monte_carlo,
)


class VerificationFailed(RuntimeError):
    """One or more verify checks missed their threshold."""


def _fmt(x: float) -> str:
    """Fixed 17-significant-digit float formatting for CSV cells."""
    return f"{x:.17g}"


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def sim_config_from(
    rc: RunConfig, seed: Optional[int] = None, n_trials: Optional[int] = None
) -> SimConfig:
    return SimConfig(
        graph=rc.graph,
        schedule=rc.schedule,
        model_kind=rc.model_kind,
        d=rc.d,
        n_rounds=rc.n_rounds,
        n_trials=rc.n_trials if n_trials is None else n_trials,
        seed=rc.seed if seed is None else seed,
        noise_sigma=rc.noise_sigma,
        beta_star_mode=RANDOM_NORMAL if rc.beta_star is None else FIXED,
        beta_star=None if rc.beta_star is None else np.array(rc.beta_star),
        risk_alignment=rc.risk_alignment,
    )


def cmd_classify(rc: RunConfig, out_dir: str) -> str:
    """Write the partition and per-node outcome report as JSON."""
    part = classify(rc.graph)
    labels = asym.predict_collapse(rc.graph)
    report = {
        "nodes": rc.graph.n_nodes,
        "m_u": [node_label(v) for v in sorted(part.m_u)],
        "m_l": [node_label(v) for v in sorted(part.m_l)],
        "m_l_inf": [node_label(v) for v in sorted(part.m_l_inf)],
        "m_l_c": [node_label(v) for v in sorted(part.m_l_c)],
        "m_l_nc": [node_label(v) for v in sorted(part.m_l_nc)],
        "collapses": [
            node_label(v) for v in sorted(labels) if labels[v] == "collapses"
        ],
        "bounded": [node_label(v) for v in sorted(labels) if labels[v] == "bounded"],
        "frozen": [node_label(v) for v in sorted(labels) if labels[v] == "frozen"],
    }
    path = os.path.join(out_dir, "classify.json")
    _write_text(path, json.dumps(report, indent=2) + "\n")
    return path


def cmd_simulate(rc: RunConfig, out_dir: str, seed=None, threads: int = 1) -> str:
    """Run the Monte Carlo experiment and write the risk-series CSV."""
    series = run_monte_carlo(sim_config_from(rc, seed=seed), threads=threads)
    lines = ["t,node,r,r_star,ratio,r_se,rstar_se,n_ok_trials"]
    for t in range(1, series.n_rounds + 1):
        for v in series.learners:
            key = (t, v)
            lines.append(
                ",".join(
                    [
                        str(t),
                        node_label(v),
                        _fmt(series.r[key]),
                        _fmt(series.r_star[key]),
                        _fmt(series.ratio[key]),
                        _fmt(series.r_se[key]),
                        _fmt(series.rstar_se[key]),
                        str(series.n_ok_trials),
                    ]
                )
            )
    path = os.path.join(out_dir, "risk_series.csv")
    _write_text(path, "\n".join(lines) + "\n")
    return path


def cmd_asymptotics(rc: RunConfig, out_dir: str) -> str:
    """Write the large-sample trace-ratio series with its sandwich bounds.

    All three value columns are on the ratio scale (trace divided by the
    single-fit trace), which no choice of single-fit covariance changes.
    """
    graph = rc.graph
    v_star = np.eye(rc.d)
    tr_v = float(rc.d)
    props = asym.LimitProportions.from_schedule(graph, rc.schedule, rc.n_rounds)
    series = asym.trace_ratio_series(graph, props, v_star, rc.n_rounds)
    lines = ["t,node,trace_ratio,lower_bound,upper_bound"]
    for t in range(1, rc.n_rounds + 1):
        for v in graph.learners:
            lower, upper = asym.trace_bounds(graph, props, v_star, t, v)
            lines.append(
                ",".join(
                    [
                        str(t),
                        node_label(v),
                        _fmt(series[(t, v)]),
                        _fmt(lower / tr_v),
                        _fmt(upper / tr_v),
                    ]
                )
            )
    path = os.path.join(out_dir, "trace_ratios.csv")
    _write_text(path, "\n".join(lines) + "\n")
    return path


def _verify_empirical_covariance(rc: RunConfig, seed, threads, corrupt: bool) -> dict:
    """two_node linear at n=5000/edge: scaled spread of the learner's
    round-3 errors over 2000 trials against the recursion's block."""
    graph = build_canonical("two_node")
    schedule = SampleSchedule.constant(graph, 5000)
    d = rc.d
    sim = SimConfig(
        graph=graph,
        schedule=schedule,
        model_kind="linear",
        d=d,
        n_rounds=3,
        n_trials=2000,
        seed=rc.seed if seed is None else seed,
        noise_sigma=rc.noise_sigma,
    )
    errs = final_errors(sim, node=1, threads=threads)
    n_t = schedule.round_total(graph, 3)
    empirical = n_t * (errs.T @ errs) / errs.shape[0]
    v_star = rc.noise_sigma**2 * np.eye(d)
    props = asym.LimitProportions.from_schedule(graph, schedule, 3)
    predicted = asym.covariance_series(graph, props, v_star, 3)[-1].block(1, 1, d)
    if corrupt:
        predicted = 2.0 * predicted
    rel = float(
        np.linalg.norm(empirical - predicted) / np.linalg.norm(predicted)
    )
    return {
        "name": "empirical_covariance_two_node",
        "observed": rel,
        "threshold": 0.15,
        "passed": rel <= 0.15,
        "detail": "relative Frobenius gap, 2000 trials, n=5000/edge, round 3",
    }


def _verify_recursion_identity(rc: RunConfig, seed) -> dict:
    """Exact linear one-round transfer identity on the config's graph."""
    sim = SimConfig(
        graph=rc.graph,
        schedule=rc.schedule,
        model_kind="linear",
        d=rc.d,
        n_rounds=min(rc.n_rounds, 50),
        n_trials=1,
        seed=rc.seed if seed is None else seed,
        noise_sigma=rc.noise_sigma,
    )
    worst = 0.0
    for trial in range(5):
        worst = max(worst, float(recursion_residuals(sim, trial).max()))
    return {
        "name": "linear_recursion_identity",
        "observed": worst,
        "threshold": 1e-8,
        "passed": worst <= 1e-8,
        "detail": f"max residual over 5 trials, {sim.n_rounds} rounds",
    }


def cmd_verify(
    rc: RunConfig,
    out_dir: str,
    seed=None,
    threads: int = 1,
    corrupt_sigma: bool = False,
) -> str:
    """Run both cross-checks and write the report; raises on failure.

    corrupt_sigma is a negative-control hook: it doubles the predicted
    covariance so the empirical check must fail.
    """
    checks = [
        _verify_empirical_covariance(rc, seed, threads, corrupt_sigma),
        _verify_recursion_identity(rc, seed),
    ]
    report = {"passed": all(c["passed"] for c in checks), "checks": checks}
    path = os.path.join(out_dir, "verify.json")
    _write_text(path, json.dumps(report, indent=2) + "\n")
    if not report["passed"]:
        failed = ", ".join(c["name"] for c in checks if not c["passed"])
        raise VerificationFailed(f"failed checks: {failed} (report at {path})")
    return path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collapsim",
        description="Simulate and analyze model collapse on interaction graphs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("classify", "graph partition and collapse prediction report"),
        ("simulate", "Monte Carlo risk-ratio series CSV"),
        ("asymptotics", "large-sample trace-ratio series CSV"),
        ("verify", "empirical-vs-asymptotic cross-checks"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1, help="worker processes")
        if name == "verify":
            p.add_argument(
                "--corrupt-sigma", action="store_true", help=argparse.SUPPRESS
            )
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        rc = load_config(args.config)
    except (SchemaError, SyntaxError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = args.out if args.out is not None else rc.out_dir
    try:
        if args.command == "classify":
            path = cmd_classify(rc, out_dir)
        elif args.command == "simulate":
            path = cmd_simulate(rc, out_dir, seed=args.seed, threads=args.threads)
        elif args.command == "asymptotics":
            path = cmd_asymptotics(rc, out_dir)
        else:
            path = cmd_verify(
                rc,
                out_dir,
                seed=args.seed,
                threads=args.threads,
                corrupt_sigma=getattr(args, "corrupt_sigma", False),
            )
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 4
    except (SimulationError, ModelError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
