"""Vector fields and trajectories for the two-parameter toy problems.

Every update rule maps a point in the parameter plane to a direction, so on
a two-parameter problem the whole rule is visible at once as a vector
field.  This module evaluates those fields on a grid for the two bundled
toys, traces fixed-step-length descent paths through them, and writes both
as CSV with a JSON sidecar describing the guide lines a renderer should
draw (per-sample optimum lines or decision boundaries).

Directions are computed undamped.  Cells where that is impossible, because
a per-sample gradient vanishes there, are flagged rather than smoothed
over: the flags mark exactly the lines where the outer-product rules
degrade, which is the point of drawing these fields.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from natgrad import curvature, linalg, models, updates
from natgrad.models import Batch, ModelSpec
from natgrad.updates import DegenerateRowWarning

TOY_METHODS = ("sgd", "ngd", "ief", "ef")


@dataclass(frozen=True)
class GridConfig:
    lo: float = -2.0
    hi: float = 2.0
    points: int = 41

    def __post_init__(self) -> None:
        if not self.hi > self.lo:
            raise ValueError("grid upper bound must exceed lower bound")
        if self.points < 2:
            raise ValueError("grid needs at least two points per axis")

    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points)


@dataclass(frozen=True)
class FieldRow:
    method: str
    theta0: float
    theta1: float
    loss: float
    d0: float
    d1: float
    degenerate: bool


@dataclass(frozen=True)
class TrajectoryRow:
    method: str
    step: int
    theta0: float
    theta1: float
    loss: float


def toy_direction(
    spec: ModelSpec, batch: Batch, theta: np.ndarray, method: str
) -> tuple[np.ndarray, bool]:
    """Undamped update direction at one parameter point, with a degeneracy flag.

    The flag is set when the direction had to be computed without one or
    more vanishing per-sample gradients (outer-product rules), when the
    gradient itself vanishes (plain gradient), or when the curvature solve
    failed.  The returned direction is then the natural limit from the
    retained samples, or zero if nothing was left.
    """
    if method not in TOY_METHODS:
        raise ValueError(f"unknown toy method {method!r}")
    theta = np.asarray(theta, dtype=np.float64)
    lin = models.batch_linearize(spec, theta, batch)
    if method == "sgd":
        direction = lin.total_grad
        return direction, bool(
            np.linalg.norm(direction) <= updates.DEGENERATE_ROW_NORM
        )
    if method == "ngd":
        fisher = curvature.build_fisher(spec, theta, batch)
        try:
            return linalg.solve_spd(fisher.matrix, lin.total_grad), False
        except linalg.SingularAfterRidge:
            return np.zeros_like(theta), True
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateRowWarning)
        if method == "ief":
            vector = updates.ief_update(lin, damping=0.0)
        else:
            vector = updates.ef_update(lin, damping=0.0)
    degenerate = any(
        issubclass(w.category, DegenerateRowWarning) for w in caught
    )
    return vector.direction, degenerate


def _toy_field(
    spec: ModelSpec,
    batch: Batch,
    grid: GridConfig,
    methods: Sequence[str],
) -> list[FieldRow]:
    rows = []
    axis = grid.axis()
    for method in methods:
        for b in axis:
            for a in axis:
                theta = np.array([a, b])
                loss = float(
                    models.batch_linearize(spec, theta, batch).losses.sum()
                )
                direction, degenerate = toy_direction(spec, batch, theta, method)
                rows.append(
                    FieldRow(
                        method=method,
                        theta0=float(a),
                        theta1=float(b),
                        loss=loss,
                        d0=float(direction[0]),
                        d1=float(direction[1]),
                        degenerate=degenerate,
                    )
                )
    return rows


def _meta(toy: str, grid: GridConfig, guide_lines: list[dict]) -> dict:
    return {
        "toy": toy,
        "grid": {"lo": grid.lo, "hi": grid.hi, "points": grid.points},
        "guide_lines": guide_lines,
    }


def lls_toy_field(
    grid: GridConfig | None = None, methods: Sequence[str] = TOY_METHODS
) -> tuple[list[FieldRow], dict]:
    """Field rows and rendering metadata for the least-squares toy.

    The guide lines are the two per-sample optimum lines (offset zero, and
    offset plus slope zero); on them one residual vanishes and the
    outer-product rules lose a row.
    """
    grid = grid or GridConfig()
    spec, batch = models.lls_toy()
    guide = [
        {"label": "sample-0-optimum", "coeffs": [1.0, 0.0], "rhs": 0.0, "style": "dashed"},
        {"label": "sample-1-optimum", "coeffs": [1.0, 1.0], "rhs": 0.0, "style": "dashed"},
    ]
    return _toy_field(spec, batch, grid, methods), _meta(
        "linear-least-squares", grid, guide
    )


def logistic_toy_field(
    grid: GridConfig | None = None, methods: Sequence[str] = TOY_METHODS
) -> tuple[list[FieldRow], dict]:
    """Field rows and rendering metadata for the logistic toy.

    The guide lines are the two per-sample decision boundaries.  No cell in
    a finite grid is degenerate here: per-sample gradients only vanish in
    the infinite-margin limit.
    """
    grid = grid or GridConfig()
    spec, batch = models.logistic_toy()
    guide = [
        {"label": "sample-0-boundary", "coeffs": [1.0, 0.0], "rhs": 0.0, "style": "dashed"},
        {"label": "sample-1-boundary", "coeffs": [1.0, 2.0], "rhs": 0.0, "style": "dashed"},
    ]
    return _toy_field(spec, batch, grid, methods), _meta(
        "logistic-binary", grid, guide
    )


def trace_trajectories(
    spec: ModelSpec,
    batch: Batch,
    start: np.ndarray,
    methods: Sequence[str] = TOY_METHODS,
    step_length: float = 0.01,
    max_steps: int = 1000,
    loss_tol: float = 1e-10,
) -> list[TrajectoryRow]:
    """Descent paths with fixed step length from a common starting point.

    Each step moves ``step_length`` along the normalised update direction,
    which makes paths comparable across methods whose raw magnitudes differ
    by orders of magnitude.  A path stops at ``max_steps``, when the total
    loss drops below ``loss_tol``, or when its direction degenerates to
    zero.
    """
    rows = []
    for method in methods:
        theta = np.asarray(start, dtype=np.float64).copy()
        for step in range(max_steps + 1):
            loss = float(models.batch_linearize(spec, theta, batch).losses.sum())
            rows.append(
                TrajectoryRow(
                    method=method,
                    step=step,
                    theta0=float(theta[0]),
                    theta1=float(theta[1]),
                    loss=loss,
                )
            )
            if loss < loss_tol or step == max_steps:
                break
            direction, _ = toy_direction(spec, batch, theta, method)
            norm = np.linalg.norm(direction)
            if norm <= updates.DEGENERATE_ROW_NORM:
                break
            theta = theta - step_length * direction / norm
    return rows


def write_field_csv(path, rows: Sequence[FieldRow], meta: dict | None = None) -> None:
    """Write field rows as CSV; metadata goes to a ``.meta.json`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["theta0", "theta1", "loss", "method", "d0", "d1", "degenerate_flag"]
        )
        for r in rows:
            writer.writerow(
                [
                    repr(r.theta0),
                    repr(r.theta1),
                    repr(r.loss),
                    r.method,
                    repr(r.d0),
                    repr(r.d1),
                    int(r.degenerate),
                ]
            )
    if meta is not None:
        sidecar = path.with_suffix(".meta.json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_trajectory_csv(path, rows: Sequence[TrajectoryRow]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "step", "theta0", "theta1", "loss"])
        for r in rows:
            writer.writerow(
                [r.method, r.step, repr(r.theta0), repr(r.theta1), repr(r.loss)]
            )
