"""Figure rendering for the CSV artifacts of the optimisation laboratory.

The experiment tools write flat CSVs (vector fields, trajectories,
indicator evaluations, damping sweeps, training metrics); this package
turns them into four figure kinds through pure builders that return
:class:`matplotlib.figure.Figure` objects, plus a one-figure-per-process
command line wrapper.  Rendering never mutates its inputs and the same
inputs always produce byte-identical images.
"""

from .cli import EXIT_CONFIG, EXIT_OK, KINDS, build_figure, main
from .figures import (
    load_field_meta,
    render_gamma,
    render_sweep,
    render_toy,
    render_train,
    save_figure,
)
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
    read_header,
)

__version__ = "0.1.0"

__all__ = [
    "EXIT_CONFIG",
    "EXIT_OK",
    "FIELD_COLUMNS",
    "INDICATOR_COLUMNS",
    "KINDS",
    "METRICS_COLUMNS",
    "SWEEP_COLUMNS",
    "SchemaError",
    "TRAJECTORY_COLUMNS",
    "Table",
    "build_figure",
    "concat_tables",
    "load_field_meta",
    "load_table",
    "main",
    "read_header",
    "render_gamma",
    "render_sweep",
    "render_toy",
    "render_train",
    "save_figure",
]
