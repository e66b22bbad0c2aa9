"""Update-quality indicator, method comparison, and damping sweeps.

The central quantity is a scale-free score for a candidate update
direction: the curvature norm of the direction divided by its overlap with
the gradient.  Smaller is better, the exact curvature-preconditioned
direction is the minimiser, and a quadratic model of the loss predicts a
reduction of ``1 / (2 * score**2)`` after an exact line search.  Everything
else in this module is bookkeeping: evaluating a set of methods over a set
of batches, ratios against the plain-gradient baseline, sweeping the
damping strength, and writing the results as CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from natgrad import curvature, linalg, models, updates
from natgrad.models import Batch, ModelSpec
from natgrad.updates import UpdateRequest

ORTHOGONAL_OVERLAP = 1e-30
EVAL_METHODS = ("sgd", "ef", "ief", "sf", "ngd-exact", "ngd-cg")


class OrthogonalUpdate(Exception):
    """Direction has no overlap with the gradient, so the score is undefined."""


def gamma(
    fvp: Callable[[np.ndarray], np.ndarray],
    grad: np.ndarray,
    direction: np.ndarray,
) -> float:
    """Quality score of an update direction under a curvature operator.

    Computes ``sqrt(d' F d) / |d' g|`` where ``F`` is applied through
    ``fvp``.  The score is invariant to positive rescaling of ``direction``
    and is minimised (over all directions) by ``F^{-1} g``.  Raises
    :class:`OrthogonalUpdate` when the overlap ``|d' g|`` is at or below
    ``1e-30``.  The quadratic form is clamped at zero before the square
    root to absorb roundoff on near-null directions.
    """
    direction = np.asarray(direction, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    overlap = abs(float(direction @ grad))
    if overlap <= ORTHOGONAL_OVERLAP:
        raise OrthogonalUpdate(
            f"direction-gradient overlap {overlap:.3e} is below {ORTHOGONAL_OVERLAP:.0e}"
        )
    quad = float(direction @ fvp(direction))
    return float(np.sqrt(max(quad, 0.0)) / overlap)


def make_fvp(
    spec: ModelSpec, theta: np.ndarray, batch: Batch
) -> Callable[[np.ndarray], np.ndarray]:
    """Close over a model state to get a curvature-vector product function."""

    def fvp(vector: np.ndarray) -> np.ndarray:
        return models.fisher_vector_product(spec, theta, batch, vector)

    return fvp


def lqa_predicted_reduction(score: float) -> float:
    """Loss reduction a local quadratic model predicts after an exact line
    search along a direction with the given quality score."""
    if not score > 0.0:
        raise ValueError(f"score must be positive, got {score}")
    return 1.0 / (2.0 * score * score)


def grad_norm_imbalance(lin: models.BatchLinearization) -> float:
    """Ratio of the largest to smallest per-sample gradient norm.

    Rows below the degeneracy threshold are ignored; raises ``ValueError``
    if every row is degenerate.  Large values flag batches where a few
    samples dominate sums over per-sample gradients.
    """
    norms = lin.row_norms
    kept = norms[norms >= updates.DEGENERATE_ROW_NORM]
    if kept.size == 0:
        raise ValueError("every per-sample gradient in the batch is degenerate")
    return float(kept.max() / kept.min())


# ---------------------------------------------------------------------------
# method evaluation over batches


@dataclass(frozen=True)
class IndicatorReport:
    """Score of one method on one batch.  ``status`` is ``"ok"`` or the name
    of the failure that prevented scoring."""

    checkpoint: str
    method: str
    damping: float
    batch_idx: int
    gamma: float | None
    gamma_ratio_sgd: float | None
    imbalance: float | None
    status: str


@dataclass(frozen=True)
class MethodSummary:
    method: str
    mean_gamma: float
    std_gamma: float
    mean_ratio: float
    std_ratio: float
    n_ok: int


@dataclass
class EvaluationResult:
    reports: list[IndicatorReport] = field(default_factory=list)
    summaries: dict[str, MethodSummary] = field(default_factory=dict)


def _resolve_damping(request: UpdateRequest, lin: models.BatchLinearization) -> float:
    if request.method == "sgd":
        return 0.0
    if request.damping is not None:
        return request.damping
    return updates.trace_damping(lin.jacobian)


def _direction_for(
    request: UpdateRequest,
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    lin: models.BatchLinearization,
    fvp: Callable[[np.ndarray], np.ndarray],
    damping: float,
    batch_idx: int,
) -> np.ndarray:
    method = request.method
    if method == "sgd":
        return lin.total_grad
    if method == "ef":
        return updates.ef_update(lin, damping).direction
    if method == "ief":
        return updates.ief_update(lin, damping).direction
    if method == "sf":
        pseudo = models.sample_pseudo_gradients(
            spec, theta, batch, seed=request.seed + batch_idx
        )
        return updates.sf_update(lin, pseudo.jacobian, damping).direction
    if method == "ngd-exact":
        fisher = curvature.build_fisher(spec, theta, batch)
        return updates.ngd_exact_update(fisher, lin.total_grad, damping).direction
    if method == "ngd-cg":
        vector, _ = updates.ngd_cg_update(
            fvp, lin.total_grad, cg_iters=request.cg_iters, damping=damping
        )
        return vector.direction
    raise ValueError(f"unknown evaluation method {method!r}")


def evaluate_methods(
    spec: ModelSpec,
    theta: np.ndarray,
    batches: Sequence[Batch],
    requests: Sequence[UpdateRequest],
    checkpoint: str = "",
) -> EvaluationResult:
    """Score each requested method on each batch, with ratios against sgd.

    The request list must include ``"sgd"``: its score is the denominator
    every other method is compared to.  A failure in one cell (orthogonal
    update, singular solve, degenerate batch, oversized model) is recorded
    in that cell's ``status`` and excluded from the summaries instead of
    aborting the evaluation.  Scores use the exact curvature operator of
    the evaluation batch regardless of which approximation produced the
    direction, so the comparison across methods is on equal terms.
    """
    methods = [r.method for r in requests]
    if len(set(methods)) != len(methods):
        raise ValueError("duplicate method in evaluation requests")
    unknown = set(methods) - set(EVAL_METHODS)
    if unknown:
        raise ValueError(f"unknown evaluation methods: {sorted(unknown)}")
    if "sgd" not in methods:
        raise ValueError("evaluation requests must include the sgd baseline")

    result = EvaluationResult()
    scores: dict[str, list[float]] = {m: [] for m in methods}
    ratios: dict[str, list[float]] = {m: [] for m in methods}
    sgd_request = next(r for r in requests if r.method == "sgd")
    other_requests = [r for r in requests if r.method != "sgd"]

    for batch_idx, batch in enumerate(batches):
        lin = models.batch_linearize(spec, theta, batch)
        fvp = make_fvp(spec, theta, batch)
        try:
            imbalance = grad_norm_imbalance(lin)
        except ValueError:
            imbalance = None

        def scored(request: UpdateRequest) -> IndicatorReport:
            damping = _resolve_damping(request, lin)
            try:
                direction = _direction_for(
                    request, spec, theta, batch, lin, fvp, damping, batch_idx
                )
                score = gamma(fvp, lin.total_grad, direction)
            except (
                OrthogonalUpdate,
                linalg.LinalgError,
                curvature.TooLarge,
                ValueError,
            ) as exc:
                return IndicatorReport(
                    checkpoint,
                    request.method,
                    damping,
                    batch_idx,
                    None,
                    None,
                    imbalance,
                    type(exc).__name__,
                )
            return IndicatorReport(
                checkpoint,
                request.method,
                damping,
                batch_idx,
                score,
                None,
                imbalance,
                "ok",
            )

        sgd_report = scored(sgd_request)
        result.reports.append(sgd_report)
        if sgd_report.status == "ok":
            scores["sgd"].append(sgd_report.gamma)
            ratios["sgd"].append(1.0)
        for request in other_requests:
            report = scored(request)
            if report.status == "ok":
                scores[request.method].append(report.gamma)
                if sgd_report.status == "ok":
                    ratio = report.gamma / sgd_report.gamma
                    ratios[request.method].append(ratio)
                    report = IndicatorReport(
                        report.checkpoint,
                        report.method,
                        report.damping,
                        report.batch_idx,
                        report.gamma,
                        ratio,
                        report.imbalance,
                        report.status,
                    )
            result.reports.append(report)

    for method in methods:
        got = np.array(scores[method], dtype=np.float64)
        got_ratio = np.array(ratios[method], dtype=np.float64)
        result.summaries[method] = MethodSummary(
            method=method,
            mean_gamma=float(got.mean()) if got.size else float("nan"),
            std_gamma=float(got.std()) if got.size else float("nan"),
            mean_ratio=float(got_ratio.mean()) if got_ratio.size else float("nan"),
            std_ratio=float(got_ratio.std()) if got_ratio.size else float("nan"),
            n_ok=int(got.size),
        )
    return result


# ---------------------------------------------------------------------------
# damping sweep


@dataclass(frozen=True)
class SweepGrid:
    """Damping values to sweep, and how many batches to score per value.

    ``batches_per_point`` of zero means every provided batch.
    """

    dampings: tuple[float, ...]
    batches_per_point: int = 0


@dataclass(frozen=True)
class SweepRow:
    checkpoint: str
    method: str
    damping: float
    mean_ratio: float
    std_ratio: float
    n_ok: int
    status: str


def damping_sweep(
    spec: ModelSpec,
    theta: np.ndarray,
    batches: Sequence[Batch],
    grid: SweepGrid,
    methods: Sequence[str] = ("ef", "ief", "sf"),
    checkpoint: str = "",
    seed: int = 0,
) -> list[SweepRow]:
    """Mean score ratio against sgd for each method at each damping value.

    The sgd score and the sampled-label draw for each batch are computed
    once and reused across the whole grid, so rows at different damping
    values differ only through the damping.  Ratios are averaged per batch
    and then across batches.  A row whose every cell failed is kept with
    ``status="empty"`` and NaN statistics.
    """
    unknown = set(methods) - {"ef", "ief", "sf"}
    if unknown:
        raise ValueError(f"damping sweep supports ef, ief, sf; got {sorted(unknown)}")
    use = list(batches)
    if grid.batches_per_point > 0:
        use = use[: grid.batches_per_point]

    prepared = []
    for batch_idx, batch in enumerate(use):
        lin = models.batch_linearize(spec, theta, batch)
        fvp = make_fvp(spec, theta, batch)
        try:
            sgd_score = gamma(fvp, lin.total_grad, lin.total_grad)
        except OrthogonalUpdate:
            # A batch with no gradient cannot anchor ratios; skip it.
            continue
        pseudo = None
        if "sf" in methods:
            pseudo = models.sample_pseudo_gradients(
                spec, theta, batch, seed=seed + batch_idx
            )
        prepared.append((lin, fvp, sgd_score, pseudo))

    rows = []
    for damping in grid.dampings:
        for method in methods:
            got = []
            for lin, fvp, sgd_score, pseudo in prepared:
                try:
                    if method == "ef":
                        direction = updates.ef_update(lin, damping).direction
                    elif method == "ief":
                        direction = updates.ief_update(lin, damping).direction
                    else:
                        direction = updates.sf_update(
                            lin, pseudo.jacobian, damping
                        ).direction
                    got.append(gamma(fvp, lin.total_grad, direction) / sgd_score)
                except (OrthogonalUpdate, linalg.LinalgError, ValueError):
                    continue
            values = np.array(got, dtype=np.float64)
            rows.append(
                SweepRow(
                    checkpoint=checkpoint,
                    method=method,
                    damping=damping,
                    mean_ratio=float(values.mean()) if values.size else float("nan"),
                    std_ratio=float(values.std()) if values.size else float("nan"),
                    n_ok=int(values.size),
                    status="ok" if values.size else "empty",
                )
            )
    return rows


# ---------------------------------------------------------------------------
# CSV output


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_indicator_csv(path, reports: Sequence[IndicatorReport]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "checkpoint",
                "method",
                "damping",
                "batch_idx",
                "gamma",
                "gamma_ratio_sgd",
                "imbalance",
                "status",
            ]
        )
        for r in reports:
            writer.writerow(
                [
                    r.checkpoint,
                    r.method,
                    _cell(r.damping),
                    r.batch_idx,
                    _cell(r.gamma),
                    _cell(r.gamma_ratio_sgd),
                    _cell(r.imbalance),
                    r.status,
                ]
            )


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "checkpoint",
                "method",
                "damping",
                "mean_ratio",
                "std_ratio",
                "n_ok",
                "status",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.checkpoint,
                    r.method,
                    _cell(r.damping),
                    _cell(r.mean_ratio),
                    _cell(r.std_ratio),
                    r.n_ok,
                    r.status,
                ]
            )
