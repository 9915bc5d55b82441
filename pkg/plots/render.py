#!/usr/bin/env python3
"""Line charts from the simulator's CSV output.

Reads risk_series.csv or trace_ratios.csv (auto-detected by header) and
draws one ratio curve per learner node against the training cycle. Two
input files give a side-by-side two-panel figure for left/right graph
comparisons. SVG output is the default; any other extension matplotlib
knows (png, pdf) works too.

Usage:
    plots/render.py --in risk_series.csv --out figure.svg
    plots/render.py --in left.csv --in right.csv --out both.svg \
        --title "one edge apart" --ymax 40
"""

import argparse
import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# the two CSV layouts cmd_simulate / cmd_asymptotics emit
RATIO_COLUMNS = ("ratio", "trace_ratio")
REQUIRED = ("t", "node")


class SchemaMismatch(ValueError):
    """Input CSV lacks the simulator's columns."""


class EmptyInput(ValueError):
    """Input CSV has a header but no data rows."""


@dataclass(frozen=True)
class PlotJob:
    inputs: tuple[str, ...]
    output: str
    title: str | None = None
    ymax: float | None = None

    def __post_init__(self):
        if not 1 <= len(self.inputs) <= 2:
            raise ValueError("render takes one or two input CSVs")


@dataclass
class Series:
    """Per-node ratio curves of one CSV, keyed by display label."""

    name: str
    curves: dict[str, tuple[list[int], list[float]]] = field(default_factory=dict)


def _node_order(label: str) -> int:
    try:
        return int(label[2:])
    except ValueError as exc:
        raise SchemaMismatch(f"unrecognized node label {label!r}") from exc


def load_series(path: str) -> Series:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        ratio_col = next((c for c in RATIO_COLUMNS if c in header), None)
        missing = [c for c in REQUIRED if c not in header]
        if ratio_col is None or missing:
            raise SchemaMismatch(
                f"{path}: header {header} lacks "
                f"{missing + ([] if ratio_col else ['ratio or trace_ratio'])}"
            )
        series = Series(name=Path(path).stem)
        for row in reader:
            label = row["node"]
            if not label.startswith("mu"):
                raise SchemaMismatch(f"{path}: unrecognized node label {label!r}")
            xs, ys = series.curves.setdefault(label, ([], []))
            xs.append(int(row["t"]))
            ys.append(float(row[ratio_col]))
    if not series.curves:
        raise EmptyInput(f"{path}: no data rows")
    return series


def render(job: PlotJob) -> str:
    """Draw the job and return the output path."""
    all_series = [load_series(p) for p in job.inputs]
    n_panels = len(all_series)
    fig, axes = plt.subplots(
        1, n_panels, figsize=(6.0 * n_panels, 4.2), squeeze=False, sharey=True
    )
    for ax, series in zip(axes[0], all_series):
        for label in sorted(series.curves, key=_node_order):
            xs, ys = series.curves[label]
            (line,) = ax.plot(xs, ys, label=label)
            line.set_gid(f"curve_{label}")
        ax.set_xlabel("training cycle")
        ax.set_ylabel("risk ratio")
        if n_panels > 1:
            ax.set_title(series.name)
        if job.ymax is not None:
            ax.set_ylim(top=job.ymax)
        ax.legend(loc="upper left")
    if job.title:
        fig.suptitle(job.title)
    fig.tight_layout()
    # strip the volatile bits so identical inputs give identical bytes
    plt.rcParams["svg.hashsalt"] = "render"
    fig.savefig(job.output, metadata=_stable_metadata(job.output))
    plt.close(fig)
    return job.output


def _stable_metadata(output: str) -> dict | None:
    suffix = Path(output).suffix.lower()
    if suffix == ".svg":
        return {"Date": None}
    if suffix == ".png":
        return {"Software": None}
    return None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="render", description="plot ratio curves from simulator CSVs"
    )
    parser.add_argument(
        "--in", dest="inputs", action="append", required=True, metavar="CSV",
        help="input CSV; pass twice for a two-panel comparison",
    )
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--title", default=None)
    parser.add_argument("--ymax", type=float, default=None)
    args = parser.parse_args(argv)
    try:
        job = PlotJob(
            inputs=tuple(args.inputs),
            output=args.out,
            title=args.title,
            ymax=args.ymax,
        )
        path = render(job)
    except (OSError, ValueError) as exc:
        print(f"render: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
