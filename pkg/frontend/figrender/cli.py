"""Command-line entry point: render exactly one figure per invocation.

Usage::

    render_figures.py --kind {toy,gamma,sweep,train} --in a.csv [b.csv ...] --out figure.png

For the ``toy`` kind the inputs are one field table plus any number of
trajectory tables; the two are told apart by their headers, so the order
of the ``--in`` arguments does not matter.  The other kinds take one or
more same-schema tables and stack their rows.

Exit codes: 0 success, 2 usage error or input that fails schema checks.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .figures import (
    render_gamma,
    render_sweep,
    render_toy,
    render_train,
    save_figure,
)
from .tables import SchemaError, read_header

EXIT_OK = 0
EXIT_CONFIG = 2

KINDS = ("toy", "gamma", "sweep", "train")


def _split_toy_inputs(paths: list[Path]) -> tuple[Path, list[Path]]:
    fields: list[Path] = []
    trajectories: list[Path] = []
    for path in paths:
        header = read_header(path)
        if "d0" in header:
            fields.append(path)
        elif "step" in header and "theta0" in header:
            trajectories.append(path)
        else:
            raise SchemaError(
                path,
                reason=(
                    "not a field table (d0/d1 columns) and not a "
                    "trajectory table (step/theta0 columns)"
                ),
            )
    if len(fields) != 1:
        raise SchemaError(
            paths[0],
            reason=f"toy figures need exactly one field table, got {len(fields)}",
        )
    return fields[0], trajectories


def build_figure(kind: str, inputs: list[Path]):
    """Dispatch to the right builder for ``kind`` and return the Figure."""
    if kind == "toy":
        field, trajectories = _split_toy_inputs(inputs)
        return render_toy(field, trajectories)
    if kind == "gamma":
        return render_gamma(inputs)
    if kind == "sweep":
        return render_sweep(inputs)
    if kind == "train":
        return render_train(inputs)
    raise ValueError(f"unknown figure kind {kind!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="render_figures.py",
        description="Render one figure from experiment CSV artifacts.",
    )
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument(
        "--in",
        dest="inputs",
        required=True,
        nargs="+",
        metavar="CSV",
        help="input tables; toy figures take one field table plus optional trajectories",
    )
    parser.add_argument("--out", required=True, metavar="IMG")
    args = parser.parse_args(argv)
    try:
        fig = build_figure(args.kind, [Path(p) for p in args.inputs])
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    save_figure(fig, Path(args.out))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
