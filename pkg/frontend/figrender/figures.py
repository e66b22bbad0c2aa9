"""Builders for the four figure kinds.

Each builder returns a bare :class:`matplotlib.figure.Figure`, so callers
and tests can inspect axes, arrow counts, scales and error bars without
writing an image first.  Nothing here imports pyplot: there is no global
figure state, and building the same figure from the same inputs twice
yields identical images.

The four kinds:

* ``toy``    one panel per update method showing the update direction
             field of a two-parameter problem, with dashed guide lines
             marking per-sample optimal-parameter sets and optional
             overlaid descent trajectories.
* ``gamma``  per-method indicator ratio against the sgd baseline across
             training checkpoints, mean with 1-sigma error bars over
             evaluation batches, log-scaled y.
* ``sweep``  mean indicator ratio against damping strength for the
             first, middle and last checkpoint, log-log panels with
             1-sigma error bars.
* ``train``  training-loss curves, one per metrics file.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .tables import (
    FIELD_COLUMNS,
    INDICATOR_COLUMNS,
    METRICS_COLUMNS,
    SWEEP_COLUMNS,
    TRAJECTORY_COLUMNS,
    SchemaError,
    Table,
    concat_tables,
    load_table,
)

BASELINE_METHOD = "sgd"
STATUS_OK = "ok"
_REFERENCE_LINE = {"color": "0.45", "linestyle": ":", "linewidth": 1.0, "zorder": 1}
_TRAJECTORY_COLOR = "tab:red"


def _subplot_grid(n: int) -> tuple[int, int]:
    ncols = max(1, math.ceil(math.sqrt(n)))
    nrows = math.ceil(n / ncols)
    return nrows, ncols


def _axes_list(fig: Figure, n: int):
    """n visible axes on a near-square grid, extras switched off."""
    nrows, ncols = _subplot_grid(n)
    axs = np.atleast_1d(fig.subplots(nrows, ncols)).ravel()
    for ax in axs[n:]:
        ax.set_axis_off()
    return list(axs[:n])


def load_field_meta(field_path: Path) -> dict:
    """Sidecar JSON describing a field table's grid and guide lines.

    The producing tool always writes ``<name>.meta.json`` next to
    ``<name>.csv``; a field table without it cannot be rendered because
    the guide lines and grid bounds live only in the sidecar.
    """
    sidecar = Path(field_path).with_suffix(".meta.json")
    if not sidecar.is_file():
        raise SchemaError(
            sidecar, reason="field table has no .meta.json sidecar"
        )
    try:
        return json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(sidecar, reason=f"sidecar is not valid JSON: {exc}") from None


def _draw_guide_line(ax, guide: dict, lo: float, hi: float, meta_path: Path) -> None:
    a, b = (float(c) for c in guide["coeffs"])
    rhs = float(guide["rhs"])
    style = "--" if guide.get("style") == "dashed" else "-"
    kwargs = {
        "color": "0.15",
        "linestyle": style,
        "linewidth": 1.2,
        "label": guide.get("label"),
        "zorder": 3,
    }
    if b == 0.0:
        if a == 0.0:
            raise SchemaError(
                meta_path,
                reason=f"guide line {guide.get('label')!r} has zero coefficients",
            )
        ax.axvline(rhs / a, **kwargs)
    else:
        xs = np.array([lo, hi])
        ax.plot(xs, (rhs - a * xs) / b, **kwargs)


def render_toy(field_path, trajectory_paths=()) -> Figure:
    """Per-method update direction fields with guide lines and trajectories.

    Cells whose ``degenerate_flag`` is set are left out of the quiver: the
    producing tool marks them when a sample-weighted update is singular
    there, so the stored direction is not meaningful.  Arrows are drawn
    unit length along the optimiser's motion (the negated update vector),
    so the field shows direction of travel, not step magnitude.
    """
    field = load_table(field_path, FIELD_COLUMNS)
    meta_path = Path(field_path).with_suffix(".meta.json")
    meta = load_field_meta(field_path)
    grid = meta.get("grid", {})
    theta0 = field.floats("theta0")
    theta1 = field.floats("theta1")
    lo = float(grid.get("lo", theta0.min()))
    hi = float(grid.get("hi", theta0.max()))
    points = int(grid.get("points", max(len(np.unique(theta0)), 2)))
    cell = (hi - lo) / max(points - 1, 1)
    guides = meta.get("guide_lines", [])

    trajectories = [
        load_table(p, TRAJECTORY_COLUMNS) for p in trajectory_paths
    ]

    loss = field.floats("loss")
    d0 = field.floats("d0")
    d1 = field.floats("d1")
    degenerate = field.ints("degenerate_flag") != 0
    methods = field.unique_in_order("method")

    fig = Figure(figsize=(5.0 * min(len(methods), 2) + 1.0, 4.5 * _subplot_grid(len(methods))[0]))
    axs = _axes_list(fig, len(methods))
    levels = np.linspace(float(loss.min()), float(loss.max()), 15)

    for ax, method in zip(axs, methods):
        rows = field.mask("method", method)
        ax.tricontourf(
            theta0[rows],
            theta1[rows],
            loss[rows],
            levels=levels,
            cmap="Greys",
            alpha=0.45,
            zorder=0,
        )
        keep = rows & ~degenerate
        norm = np.hypot(d0[keep], d1[keep])
        # A zero update at the exact optimum is legitimate, not degenerate;
        # keep its (invisible) arrow rather than dividing by zero.
        safe = np.where(norm > 0.0, norm, 1.0)
        ax.quiver(
            theta0[keep],
            theta1[keep],
            -d0[keep] / safe,
            -d1[keep] / safe,
            color="tab:blue",
            angles="xy",
            scale_units="xy",
            scale=1.0 / (0.8 * cell),
            width=0.004,
            zorder=2,
        )
        for guide in guides:
            _draw_guide_line(ax, guide, lo, hi, meta_path)
        for traj in trajectories:
            sel = traj.mask("method", method)
            if not sel.any():
                continue
            order = np.argsort(traj.ints("step")[sel], kind="stable")
            tx = traj.floats("theta0")[sel][order]
            ty = traj.floats("theta1")[sel][order]
            ax.plot(tx, ty, color=_TRAJECTORY_COLOR, linewidth=1.6, zorder=4)
            ax.plot(tx[0], ty[0], marker="o", color=_TRAJECTORY_COLOR, zorder=5)
            ax.plot(tx[-1], ty[-1], marker="*", markersize=10, color=_TRAJECTORY_COLOR, zorder=5)
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_aspect("equal")
        ax.set_title(method)
        ax.set_xlabel("theta0")
        ax.set_ylabel("theta1")
    handles, labels = axs[0].get_legend_handles_labels()
    if handles:
        axs[0].legend(handles, labels, fontsize=8, loc="upper right")
    if "toy" in meta:
        fig.suptitle(f"update direction fields: {meta['toy']}")
    fig.set_layout_engine("tight")
    return fig


def _ratio_values(table: Table) -> np.ndarray:
    """Per-row indicator ratio against the baseline method.

    The baseline's own rows carry an empty ratio cell because the ratio
    to itself is 1 by definition; fill that in so the baseline renders as
    a flat reference curve.
    """
    ratios = table.floats("gamma_ratio_sgd")
    baseline = np.array(
        [m == BASELINE_METHOD for m in table.strings("method")], dtype=bool
    )
    ratios[baseline & np.isnan(ratios)] = 1.0
    return ratios


def render_gamma(indicator_paths) -> Figure:
    """Indicator ratio vs training checkpoint, one errorbar curve per method.

    Points are means over evaluation batches with 1-sigma (population
    standard deviation) error bars, restricted to rows whose status is ok.
    The y-axis is log-scaled; the dotted line marks parity with the
    baseline.
    """
    table = concat_tables(
        [load_table(p, INDICATOR_COLUMNS) for p in indicator_paths],
        INDICATOR_COLUMNS,
    )
    ok = table.mask("status", STATUS_OK)
    ratios = _ratio_values(table)
    checkpoints = table.unique_in_order("checkpoint")
    methods = table.unique_in_order("method")
    positions = {c: i for i, c in enumerate(checkpoints)}
    xs_all = np.array([positions[c] for c in table.strings("checkpoint")])

    fig = Figure(figsize=(7.0, 4.5))
    ax = fig.subplots()
    for method in methods:
        rows = table.mask("method", method) & ok & ~np.isnan(ratios)
        if not rows.any():
            continue
        xs, means, stds = [], [], []
        for c in checkpoints:
            sel = rows & (xs_all == positions[c])
            if not sel.any():
                continue
            xs.append(positions[c])
            means.append(float(np.mean(ratios[sel])))
            stds.append(float(np.std(ratios[sel])))
        ax.errorbar(
            xs, means, yerr=stds, marker="o", capsize=3, label=method
        )
    ax.axhline(1.0, **_REFERENCE_LINE)
    ax.set_yscale("log")
    ax.set_xticks(range(len(checkpoints)))
    ax.set_xticklabels(checkpoints, rotation=45, ha="right")
    ax.set_xlabel("checkpoint")
    ax.set_ylabel("indicator ratio vs sgd")
    ax.set_title("update quality relative to plain gradient descent")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    fig.set_layout_engine("tight")
    return fig


def render_sweep(sweep_paths) -> Figure:
    """Indicator ratio vs damping, one log-log panel per probed checkpoint.

    Panels show the first, middle and last checkpoint present in the
    inputs (fewer when fewer exist).  Error bars are the 1-sigma spread
    recorded in ``std_ratio``; only ok rows are drawn.
    """
    table = concat_tables(
        [load_table(p, SWEEP_COLUMNS) for p in sweep_paths], SWEEP_COLUMNS
    )
    ok = table.mask("status", STATUS_OK)
    checkpoints = table.unique_in_order("checkpoint")
    picks: list[str] = []
    for idx in (0, len(checkpoints) // 2, len(checkpoints) - 1):
        if checkpoints[idx] not in picks:
            picks.append(checkpoints[idx])
    methods = table.unique_in_order("method")
    damping = table.floats("damping")
    mean_ratio = table.floats("mean_ratio")
    std_ratio = table.floats("std_ratio")

    fig = Figure(figsize=(4.6 * len(picks), 4.2))
    axs = np.atleast_1d(fig.subplots(1, len(picks), sharey=True)).ravel()
    for ax, checkpoint in zip(axs, picks):
        base = table.mask("checkpoint", checkpoint) & ok
        for method in methods:
            rows = base & table.mask("method", method) & ~np.isnan(mean_ratio)
            if not rows.any():
                continue
            order = np.argsort(damping[rows], kind="stable")
            yerr = np.nan_to_num(std_ratio[rows][order], nan=0.0)
            ax.errorbar(
                damping[rows][order],
                mean_ratio[rows][order],
                yerr=yerr,
                marker="o",
                capsize=3,
                label=method,
            )
        ax.axhline(1.0, **_REFERENCE_LINE)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("damping")
        ax.set_title(checkpoint)
        ax.grid(alpha=0.3, which="both")
    axs[0].set_ylabel("mean indicator ratio vs sgd")
    axs[0].legend(fontsize=9)
    fig.set_layout_engine("tight")
    return fig


def _curve_labels(paths: list[Path]) -> list[str]:
    stems = [p.stem for p in paths]
    return [
        f"{p.parent.name}/{p.stem}" if stems.count(p.stem) > 1 else p.stem
        for p in paths
    ]


def render_train(metrics_paths) -> Figure:
    """Training loss against optimiser step, one curve per metrics file.

    Rows whose status is not ok (a divergence record, for instance) end
    the curve; the first such step is marked with a dotted vertical line
    and the status is appended to the curve's legend label.
    """
    paths = [Path(p) for p in metrics_paths]
    tables = [load_table(p, METRICS_COLUMNS) for p in paths]
    fig = Figure(figsize=(7.0, 4.5))
    ax = fig.subplots()
    for table, label in zip(tables, _curve_labels(paths)):
        ok = table.mask("status", STATUS_OK)
        steps = table.ints("step")
        losses = table.floats("loss")
        order = np.argsort(steps[ok], kind="stable")
        bad = np.flatnonzero(~ok)
        if bad.size:
            status = table.strings("status")[int(bad[0])]
            label = f"{label} ({status} at step {int(steps[bad[0]])})"
        (line,) = ax.plot(steps[ok][order], losses[ok][order], label=label)
        if bad.size:
            ax.axvline(
                int(steps[bad[0]]), color=line.get_color(), linestyle=":", linewidth=1.0
            )
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title("training curves")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    fig.set_layout_engine("tight")
    return fig


def save_figure(fig: Figure, out_path) -> Path:
    """Write a figure to disk with bytes that depend only on its contents.

    Vector formats embed a creation date by default, which would break
    re-render idempotence, so the date metadata is stripped for them.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    suffix = out_path.suffix.lower()
    metadata = None
    if suffix == ".svg":
        metadata = {"Date": None}
    elif suffix == ".pdf":
        metadata = {"CreationDate": None}
    fig.savefig(out_path, dpi=150, metadata=metadata)
    return out_path
