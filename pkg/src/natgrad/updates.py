"""Preconditioned update directions built from one batch linearisation.

Sign convention: every rule returns the raw descent direction ``d`` and the
caller applies ``theta <- theta - eta * d``.  Under that convention the
outer-product-curvature update equalises first-order per-sample loss
reductions (``J @ d`` approaches the all-ones vector as damping vanishes),
and its rescaled variant makes the reduction of each sample proportional to
its squared logit-space gradient norm instead, which is what repairs the
inverse scaling that hurts the plain outer-product rule near convergence.

All sample-space solves run through the Gram matrix (n x n, with n the batch
size); nothing here materialises a parameter-space curvature matrix.  The
exact-curvature rules at the bottom exist as references for the evaluation
module and accept either an explicit matrix or a matrix-vector oracle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from natgrad import linalg
from natgrad.models import BatchLinearization

DEGENERATE_ROW_NORM = 1e-12
DEFAULT_DAMPING_SCALE = 1e-12
CG_BREAKDOWN = 1e-300


class DegenerateRowWarning(UserWarning):
    """Per-sample gradient rows with vanishing norm were dropped from a solve."""


@dataclass(frozen=True)
class UpdateRequest:
    """One method to evaluate: rule name, damping, and rule-specific knobs.

    ``damping=None`` asks for the trace-relative default.  ``seed`` matters
    only for the sampled rule; ``cg_iters`` only for the iterative exact rule.
    """

    method: str
    damping: float | None = None
    seed: int = 0
    cg_iters: int = 10


@dataclass(frozen=True)
class UpdateVector:
    direction: np.ndarray
    method: str
    damping: float


@dataclass(frozen=True)
class CGTrace:
    """Indicator values of successive conjugate-gradient iterates.

    ``gammas[m]`` belongs to the iterate after m + 1 steps; the zero start
    vector has no defined indicator.  ``breakdown`` records an early stop on
    a vanishing residual or curvature inner product, which signals either
    exact convergence or loss of positive definiteness.
    """

    gammas: np.ndarray
    breakdown: bool
    iterations: int


def trace_damping(jacobian: np.ndarray, scale: float = DEFAULT_DAMPING_SCALE) -> float:
    """Damping proportional to the mean squared row norm of the Jacobian.

    The Gram trace over the batch size is the natural magnitude scale of the
    outer-product curvature, so this stays meaningful across problems whose
    gradients differ by orders of magnitude.
    """
    n = max(jacobian.shape[0], 1)
    return scale * float(np.sum(jacobian * jacobian)) / n


def drop_degenerate_rows(
    lin: BatchLinearization,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a linearisation into retained Jacobian rows, their logit-space
    squared norms, and the boolean keep-mask.

    Rows with gradient norm below ``1e-12`` carry no usable curvature and
    would make the Gram matrix singular at zero damping, so they are removed
    with a warning before any sample-space solve.
    """
    norms = lin.row_norms
    keep = norms >= DEGENERATE_ROW_NORM
    if not keep.all():
        dropped = int((~keep).sum())
        warnings.warn(
            f"dropped {dropped} of {keep.size} per-sample gradient rows with "
            f"norm below {DEGENERATE_ROW_NORM:g}",
            DegenerateRowWarning,
            stacklevel=3,
        )
    return lin.jacobian[keep], lin.logit_sqnorms[keep], keep


def _resolve_damping(lin: BatchLinearization, damping: float | None) -> float:
    if damping is None:
        return trace_damping(lin.jacobian)
    if damping < 0:
        raise ValueError(f"damping must be non-negative, got {damping}")
    return float(damping)


def ef_update(lin: BatchLinearization, damping: float | None = None) -> UpdateVector:
    """Outer-product-curvature update: ``J^T (J J^T + damping I)^-1 1``.

    As damping vanishes this direction removes the same amount of loss from
    every retained sample to first order, regardless of how converged each
    sample already is; that equalisation is the rule's characteristic flaw.
    """
    damping = _resolve_damping(lin, damping)
    jac, _, _ = drop_degenerate_rows(lin)
    direction = np.zeros(lin.jacobian.shape[1])
    if jac.shape[0]:
        direction = linalg.woodbury_solve(jac, np.ones(jac.shape[0]), ridge=damping)
    return UpdateVector(direction=direction, method="ef", damping=damping)


def ief_update(lin: BatchLinearization, damping: float | None = None) -> UpdateVector:
    """Rescaled outer-product update: ``J^T (J J^T + damping I)^-1 s`` with
    ``s`` the per-sample squared logit-space gradient norms.

    The rescaling makes first-order per-sample reductions proportional to
    ``s`` and turns the rule into the exact Gauss-Newton direction for the
    model-predicted residuals; for least squares it coincides with the exact
    natural gradient in the vanishing-damping limit.
    """
    damping = _resolve_damping(lin, damping)
    jac, sq, _ = drop_degenerate_rows(lin)
    direction = np.zeros(lin.jacobian.shape[1])
    if jac.shape[0]:
        direction = linalg.woodbury_solve(jac, sq, ridge=damping)
    return UpdateVector(direction=direction, method="ief", damping=damping)


def sf_update(
    lin: BatchLinearization,
    pseudo_jacobian: np.ndarray,
    damping: float | None = None,
) -> UpdateVector:
    """Sampled-curvature update via the Sherman-Morrison-Woodbury expansion.

    With one label drawn per sample, the sampled curvature is the outer
    product of the pseudo-gradient rows, and
    ``(Jhat^T Jhat + damping I)^-1 g`` expands to
    ``(g - Jhat^T (Jhat Jhat^T + damping I)^-1 Jhat g) / damping``,
    so the cost again stays in sample space.  Damping must be positive.
    """
    damping = _resolve_damping(lin, damping)
    if damping <= 0.0:
        raise ValueError("sampled update needs strictly positive damping")
    jhat = np.asarray(pseudo_jacobian, dtype=np.float64)
    g = lin.total_grad
    gram_part = jhat.T @ linalg.solve_spd(jhat @ jhat.T, jhat @ g, ridge=damping)
    return UpdateVector(
        direction=(g - gram_part) / damping, method="sf", damping=damping
    )


def ngd_exact_update(
    fisher: np.ndarray, grad: np.ndarray, damping: float
) -> UpdateVector:
    """Reference update against an explicit curvature matrix:
    ``(F + damping I)^-1 g``."""
    matrix = getattr(fisher, "matrix", fisher)
    direction = linalg.solve_spd(matrix, grad, ridge=damping)
    return UpdateVector(direction=direction, method="ngd-exact", damping=damping)


def ngd_cg_update(
    fvp,
    grad: np.ndarray,
    cg_iters: int,
    damping: float = 0.0,
) -> tuple[UpdateVector, CGTrace]:
    """Iterative reference update: linear conjugate gradients on
    ``(F + damping I) x = g`` from the zero vector.

    Parameters
    ----------
    fvp : callable
        Matrix-vector oracle for the undamped curvature.
    grad : ndarray
        Right-hand side (the summed batch gradient).
    cg_iters : int
        Maximum iteration count; the loop also stops on numerical breakdown.
    damping : float
        Ridge added inside the oracle.

    Returns
    -------
    (UpdateVector, CGTrace)
        The final iterate and the indicator value of every iterate.

    Notes
    -----
    The indicator trace is computed against the damped operator that CG
    actually minimises over, with a fresh oracle application per iterate.
    The conjugacy identity ``x^T A x = sum_m alpha_m^2 v_m^T A v_m`` would
    save that extra call, but once the residual stagnates the accumulated
    sum drifts from the true quadratic form by enough to fake violations of
    the trace's guaranteed monotonicity.  Each CG iterate is the
    indicator-optimal vector in its Krylov subspace, so the trace is
    non-increasing.
    """
    grad = np.asarray(grad, dtype=np.float64)
    x = np.zeros_like(grad)
    r = grad.copy()
    v = r.copy()
    rs = float(r @ r)
    # Converged means the residual norm fell 15 decades below its start;
    # iterating past that point only stirs rounding noise into the iterate.
    converged = max(CG_BREAKDOWN, 1e-30 * rs)
    gammas: list[float] = []
    breakdown = False
    iterations = 0
    for _ in range(cg_iters):
        if rs <= converged:
            breakdown = True
            break
        av = fvp(v) + damping * v
        vav = float(v @ av)
        if vav <= CG_BREAKDOWN:
            breakdown = True
            break
        alpha = rs / vav
        x = x + alpha * v
        r = r - alpha * av
        rs_new = float(r @ r)
        v = r + (rs_new / rs) * v
        rs = rs_new
        iterations += 1
        quad = float(x @ (fvp(x) + damping * x))
        gammas.append(np.sqrt(max(quad, 0.0)) / abs(float(x @ grad)))
    update = UpdateVector(direction=x, method="ngd-cg", damping=damping)
    return update, CGTrace(
        gammas=np.array(gammas), breakdown=breakdown, iterations=iterations
    )


def projection_profile(lin: BatchLinearization, direction: np.ndarray) -> np.ndarray:
    """Per-sample projections ``d . grad_n / ||grad_n||`` of an update.

    This is the first-order loss reduction of each sample per unit of its own
    gradient norm.  For the plain outer-product rule the profile approaches
    ``1 / ||grad_n||``: already-converged samples get the largest projected
    step, which is the inverse scaling the rescaled rule removes.  Degenerate
    rows yield NaN.
    """
    direction = np.asarray(direction, dtype=np.float64)
    norms = lin.row_norms
    raw = lin.jacobian @ direction
    out = np.full(norms.shape, np.nan)
    ok = norms >= DEGENERATE_ROW_NORM
    out[ok] = raw[ok] / norms[ok]
    return out
