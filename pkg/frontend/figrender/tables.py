"""Strict loading of the flat CSV artifacts the experiment tools emit.

Every renderer starts from one of five table schemas: toy-problem vector
fields, toy-problem trajectories, per-batch indicator evaluations,
damping-sweep summaries, and training metrics.  A table missing required
columns is rejected up front with an error that names every absent column,
instead of letting a renderer crash on a KeyError halfway through a draw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FIELD_COLUMNS = (
    "theta0",
    "theta1",
    "loss",
    "method",
    "d0",
    "d1",
    "degenerate_flag",
)
TRAJECTORY_COLUMNS = ("method", "step", "theta0", "theta1", "loss")
INDICATOR_COLUMNS = (
    "checkpoint",
    "method",
    "damping",
    "batch_idx",
    "gamma",
    "gamma_ratio_sgd",
    "imbalance",
    "status",
)
SWEEP_COLUMNS = (
    "checkpoint",
    "method",
    "damping",
    "mean_ratio",
    "std_ratio",
    "n_ok",
    "status",
)
METRICS_COLUMNS = ("step", "epoch", "loss", "update_norm", "eta", "status")


class SchemaError(ValueError):
    """An input file is not a valid instance of the expected table schema.

    ``missing`` holds the names of absent required columns when that is the
    cause; other causes (missing file, ragged row, unreadable sidecar) carry
    an explicit ``reason`` instead.
    """

    def __init__(self, path, missing=(), reason=None):
        self.path = Path(path)
        self.missing = tuple(missing)
        if reason is None:
            reason = "missing columns: " + ", ".join(self.missing)
        super().__init__(f"{self.path}: {reason}")


@dataclass(frozen=True)
class Table:
    """Column-oriented view of one loaded CSV file."""

    path: Path
    columns: dict[str, list[str]] = field(repr=False)

    @property
    def n_rows(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def strings(self, name: str) -> list[str]:
        return self.columns[name]

    def floats(self, name: str) -> np.ndarray:
        """Column as float64; empty cells become nan."""
        return np.array(
            [float(v) if v != "" else np.nan for v in self.columns[name]],
            dtype=np.float64,
        )

    def ints(self, name: str) -> np.ndarray:
        return np.array([int(v) for v in self.columns[name]], dtype=np.int64)

    def mask(self, name: str, value: str) -> np.ndarray:
        return np.array([v == value for v in self.columns[name]], dtype=bool)

    def unique_in_order(self, name: str) -> list[str]:
        """Distinct values of a column in first-appearance order."""
        seen: list[str] = []
        for v in self.columns[name]:
            if v not in seen:
                seen.append(v)
        return seen


def read_header(path: Path) -> list[str]:
    """First row of a CSV, or a SchemaError if the file cannot be read."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(path, reason="file does not exist")
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise SchemaError(path, reason="file is empty")
    return header


def load_table(path, required: tuple[str, ...]) -> Table:
    """Read a CSV and verify it carries at least the ``required`` columns."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(path, reason="file does not exist")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(path, missing=required)
        rows = list(reader)
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(path, missing=missing)
    for k, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(
                path,
                reason=f"row {k + 2} has {len(row)} cells but the header has {len(header)}",
            )
    columns = {
        name: [row[i] for row in rows] for i, name in enumerate(header)
    }
    return Table(path=path, columns=columns)


def concat_tables(tables: list[Table], required: tuple[str, ...]) -> Table:
    """Stack several same-schema tables into one, keeping row order.

    Only the required columns survive concatenation; optional extras may
    differ between files and are dropped rather than guessed at.
    """
    if not tables:
        raise ValueError("need at least one table")
    columns = {
        name: [v for t in tables for v in t.columns[name]] for name in required
    }
    return Table(path=tables[0].path, columns=columns)
