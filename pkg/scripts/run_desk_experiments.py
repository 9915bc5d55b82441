#!/usr/bin/env python3
"""Run the desk-scale interaction-graph study end to end.

For each configured graph/kind pair this writes the node classification,
the Monte Carlo risk-ratio CSV, and the asymptotic trace-ratio CSV under
--out, then renders SVG figures (including the left/right one-edge
comparison as a two-panel plot). Everything is seeded; rerunning with the
same arguments reproduces identical CSV bytes.

    python3 scripts/run_desk_experiments.py --out results
    python3 scripts/run_desk_experiments.py --out smoke --quick
"""

import argparse
import json
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "plots"))

from render import PlotJob, render  # noqa: E402

from collapsim.cli import cmd_asymptotics, cmd_classify, cmd_simulate  # noqa: E402
from collapsim.config import parse_config  # noqa: E402

GRAPHS = ("exp5", "exp8", "onediff_left", "onediff_right")


def build_config(graph, kind, args, seed):
    doc = {
        "graph": {"canonical": graph},
        "schedule": {"n_sample": args.n_sample},
        "model": {"kind": kind, "d": args.d},
        "experiment": {
            "seed": seed,
            "n_rounds": args.rounds,
            "n_trials": args.trials,
        },
    }
    if kind == "single_index_quadratic":
        doc["experiment"]["risk_alignment"] = "sign_aligned"
    return parse_config(json.dumps(doc))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="master seed offset")
    parser.add_argument("--trials", type=int, default=200)
    parser.add_argument("--rounds", type=int, default=50)
    parser.add_argument("--n-sample", type=int, default=200)
    parser.add_argument("--d", type=int, default=5)
    parser.add_argument(
        "--kinds",
        default="linear,logistic",
        help="comma-separated model kinds to run",
    )
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument(
        "--quick", action="store_true", help="tiny run: 25 trials, 15 rounds"
    )
    args = parser.parse_args(argv)
    if args.quick:
        args.trials, args.rounds = 25, 15

    out = Path(args.out)
    figures = out / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]

    risk_csvs = {}
    for i, graph in enumerate(GRAPHS):
        for j, kind in enumerate(kinds):
            seed = args.seed + 100 * i + j
            rc = build_config(graph, kind, args, seed)
            run_dir = out / f"{graph}_{kind}"
            started = time.perf_counter()
            cmd_classify(rc, str(run_dir))
            csv_path = cmd_simulate(rc, str(run_dir), threads=args.threads)
            cmd_asymptotics(rc, str(run_dir))
            elapsed = time.perf_counter() - started
            risk_csvs[(graph, kind)] = csv_path
            print(f"{graph}/{kind}: {elapsed:.1f}s -> {run_dir}")
            render(
                PlotJob(
                    inputs=(csv_path,),
                    output=str(figures / f"{graph}_{kind}.svg"),
                    title=f"{graph} ({kind})",
                )
            )

    for kind in kinds:
        pair = (risk_csvs[("onediff_left", kind)], risk_csvs[("onediff_right", kind)])
        path = figures / f"onediff_compare_{kind}.svg"
        render(PlotJob(inputs=pair, output=str(path), title=f"one edge apart ({kind})"))
        print(f"comparison figure -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
