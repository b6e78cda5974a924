#!/usr/bin/env python3
"""Render figures from the sampler's CSV outputs.

Five figure kinds, one subcommand each:
  delta_curves   deltas.csv   -> per-block feature-change curves over timesteps
  norm_boxplot   norms.csv    -> one box per block; whiskers at the min/max
                                 columns (0th/100th percentile), not 1.5*IQR
  std_bars       norms.csv    -> one bar per block from the std column
  sample_overlay samples.csv+ -> scatter overlay of one or more sample sets
  bench_bars     bench.csv    -> median wall time per strategy

The tool draws exactly the values in the CSVs; nothing is recomputed or
aggregated. `--dump-values <json>` writes the plotted values to a sidecar
file so that claim can be checked mechanically.

Usage: plots.py <kind> --in <csv> [<csv> ...] --out <figure> [--title T]
                [--dump-values <json>]

Input schemas ('#' lines are comments, UTF-8, '.' decimals):
  deltas:  block_id,t,delta
  norms:   block_id,min,q1,median,q3,max,mean,std
  bench:   strategy,median_ns,flops_total,savings_fraction
  samples: x0,x1,...
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("delta_curves", "norm_boxplot", "std_bars", "sample_overlay", "bench_bars")

NORM_COLUMNS = ["block_id", "min", "q1", "median", "q3", "max", "mean", "std"]


class SchemaError(ValueError):
    pass


@dataclass
class FigureSpec:
    kind: str
    inputs: list[str]
    out: str
    title: str | None = None
    dump_values: str | None = None
    extra: dict = field(default_factory=dict)


def read_rows(path: str, expected_header: list[str]) -> list[dict]:
    """Parse a CSV under its documented schema, skipping comment lines."""
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise SchemaError(f"{path}: empty file, expected header {','.join(expected_header)}")
    header = lines[0].split(",")
    if header != expected_header:
        for want, got in zip(expected_header, header + [""] * len(expected_header)):
            if want != got:
                raise SchemaError(f"{path}: expected column {want!r}, found {got!r}")
        raise SchemaError(f"{path}: header {header} does not match {expected_header}")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(header):
            raise SchemaError(f"{path}: row has {len(cells)} cells, expected {len(header)}")
        rows.append(dict(zip(header, cells)))
    return rows


def _floats(row: dict, cols) -> dict:
    out = dict(row)
    for c in cols:
        try:
            out[c] = float(row[c])
        except ValueError:
            raise SchemaError(f"column {c!r}: non-numeric value {row[c]!r}")
    return out


def load_deltas(path: str):
    rows = [_floats(r, ["delta"]) for r in read_rows(path, ["block_id", "t", "delta"])]
    series: dict[str, dict[int, float]] = {}
    for r in rows:
        series.setdefault(r["block_id"], {})[int(r["t"])] = r["delta"]
    return series


def load_norms(path: str):
    return [_floats(r, NORM_COLUMNS[1:]) for r in read_rows(path, NORM_COLUMNS)]


def load_bench(path: str):
    header = ["strategy", "median_ns", "flops_total", "savings_fraction"]
    return [_floats(r, header[1:]) for r in read_rows(path, header)]


def load_samples(path: str):
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise SchemaError(f"{path}: empty samples file")
    header = lines[0].split(",")
    if not header or not all(c == f"x{i}" for i, c in enumerate(header)):
        raise SchemaError(f"{path}: expected column 'x0', found {header[0]!r}")
    pts = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(header):
            raise SchemaError(f"{path}: row has {len(cells)} cells, expected {len(header)}")
        try:
            pts.append([float(c) for c in cells])
        except ValueError:
            raise SchemaError(f"{path}: non-numeric sample row {ln!r}")
    return header, pts


def _new_axes(title):
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=120)
    if title:
        ax.set_title(title)
    return fig, ax


def render(spec: FigureSpec) -> dict:
    """Draw one figure, save it, and return the exact values drawn.

    The returned dict carries `values` (what --dump-values writes) and
    `artists` (matplotlib objects) so tests can read the figure back.
    """
    if spec.kind not in KINDS:
        raise SchemaError(f"unknown figure kind {spec.kind!r}")
    if not spec.inputs:
        raise SchemaError("at least one input CSV is required")
    builder = globals()[f"_render_{spec.kind}"]
    fig, values, artists = builder(spec)
    fig.tight_layout()
    fig.savefig(spec.out)
    plt.close(fig)
    if spec.dump_values:
        with open(spec.dump_values, "w", encoding="utf-8") as f:
            json.dump({"kind": spec.kind, "inputs": spec.inputs, "values": values}, f, indent=2)
            f.write("\n")
    return {"values": values, "artists": artists}


def _render_delta_curves(spec):
    series = load_deltas(spec.inputs[0])
    fig, ax = _new_axes(spec.title or "feature change between adjacent timesteps")
    lines = {}
    for block, by_t in series.items():
        ts = sorted(by_t, reverse=True)
        (lines[block],) = ax.plot(ts, [by_t[t] for t in ts], marker=".", label=block)
    ax.set_xlabel("timestep")
    ax.set_ylabel("per-element MSE vs previous step")
    if series:
        ax.invert_xaxis()
        ax.legend(fontsize=8)
    values = {b: {str(t): v for t, v in sorted(by_t.items(), reverse=True)} for b, by_t in series.items()}
    return fig, values, {"lines": lines}


def _render_norm_boxplot(spec):
    rows = load_norms(spec.inputs[0])
    fig, ax = _new_axes(spec.title or "feature norm distribution per block")
    stats = [
        {
            "label": r["block_id"],
            "whislo": r["min"],
            "q1": r["q1"],
            "med": r["median"],
            "q3": r["q3"],
            "whishi": r["max"],
            "fliers": [],
        }
        for r in rows
    ]
    artists = ax.bxp(stats, showfliers=False) if stats else {}
    ax.set_ylabel("Frobenius norm")
    values = {r["block_id"]: {c: r[c] for c in NORM_COLUMNS[1:]} for r in rows}
    return fig, values, {"bxp": artists}


def _render_std_bars(spec):
    rows = load_norms(spec.inputs[0])
    fig, ax = _new_axes(spec.title or "feature norm standard deviation per block")
    labels = [r["block_id"] for r in rows]
    stds = [r["std"] for r in rows]
    bars = ax.bar(labels, stds)
    ax.set_ylabel("std of Frobenius norm")
    values = {r["block_id"]: r["std"] for r in rows}
    return fig, values, {"bars": bars}


def _render_sample_overlay(spec):
    fig, ax = _new_axes(spec.title or "sample overlay")
    values = {}
    paths = {}
    for path in spec.inputs:
        header, pts = load_samples(path)
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts] if len(header) > 1 else [0.0] * len(pts)
        paths[path] = ax.scatter(xs, ys, s=4, alpha=0.5, label=os.path.basename(path))
        values[path] = pts
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=7)
    return fig, values, {"scatters": paths}


def _render_bench_bars(spec):
    rows = load_bench(spec.inputs[0])
    fig, ax = _new_axes(spec.title or "median sampling wall time")
    labels = [r["strategy"] for r in rows]
    times_ms = [r["median_ns"] / 1e6 for r in rows]
    bars = ax.bar(labels, times_ms)
    for x, r in zip(bars, rows):
        ax.annotate(
            f"{r['savings_fraction']:.0%} FLOPs saved",
            (x.get_x() + x.get_width() / 2, x.get_height()),
            ha="center",
            va="bottom",
            fontsize=7,
        )
    ax.set_ylabel("median wall time (ms)")
    values = {
        r["strategy"]: {
            "median_ns": r["median_ns"],
            "flops_total": r["flops_total"],
            "savings_fraction": r["savings_fraction"],
        }
        for r in rows
    }
    return fig, values, {"bars": bars}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plots.py", description=__doc__)
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True, metavar="CSV")
    parser.add_argument("--out", required=True)
    parser.add_argument("--title", default=None)
    parser.add_argument("--dump-values", dest="dump_values", default=None)
    args = parser.parse_args(argv)
    spec = FigureSpec(
        kind=args.kind,
        inputs=args.inputs,
        out=args.out,
        title=args.title,
        dump_values=args.dump_values,
    )
    try:
        render(spec)
    except SchemaError as e:
        print(f"schema error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
