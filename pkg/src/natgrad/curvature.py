"""Explicit curvature matrices for models small enough to afford them.

The matrix-free oracle in :mod:`natgrad.models` is what the indicator uses
day to day; this module exists to cross-check it, to feed the explicit-solve
reference update, and to host the structured approximations (sequential
rank-one accumulation and Kronecker factorisation) whose whole point is
agreement with the dense builds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from natgrad import models
from natgrad.models import Batch, BatchLinearization, ModelSpec

DEFAULT_MAX_PARAMS = 3000


class ZeroScale(Exception):
    """A rescaled build was asked to divide by a vanishing per-sample norm."""


class TooLarge(Exception):
    """Refusing to materialise a parameter-space matrix beyond the cap."""


@dataclass(frozen=True)
class CurvatureMatrix:
    """A dense symmetric curvature estimate tagged with its construction."""

    kind: str
    matrix: np.ndarray
    batch_id: str | None = None


@dataclass(frozen=True)
class KroneckerFactorPair:
    """Per-layer factors whose Kronecker product approximates a layer block.

    ``input_factor`` is the second moment of layer inputs; ``output_factor``
    is the second moment of per-sample pre-activation gradients, optionally
    rescaled or computed from sampled labels depending on ``variant``.
    """

    input_factor: np.ndarray
    output_factor: np.ndarray
    variant: str


def _guard_size(spec: ModelSpec, max_params: int) -> None:
    if spec.n_params > max_params:
        raise TooLarge(
            f"model has {spec.n_params} parameters, cap is {max_params}; "
            "use the matrix-free oracle instead"
        )


def build_fisher(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    max_params: int = DEFAULT_MAX_PARAMS,
    batch_id: str | None = None,
) -> CurvatureMatrix:
    """Exact Fisher information of the batch as a dense matrix.

    For classification kinds this sums, over every sample and every class,
    the predictive probability times the outer product of the loss gradient
    the sample would have under that class label.  For least squares the
    label distribution is a unit-variance Gaussian around the prediction and
    the class sum collapses to the outer products of the prediction
    gradients.  Both are textbook evaluations of the expected outer product
    of log-likelihood gradients, independent of the matrix-free
    Gauss-Newton oracle they are tested against.
    """
    _guard_size(spec, max_params)
    theta = np.asarray(theta, dtype=np.float64)
    n = len(batch)
    out = np.zeros((spec.n_params, spec.n_params))
    if spec.kind == "linear-least-squares":
        phi = models.affine_feature_rows(spec, batch)
        out = phi.T @ phi
        return CurvatureMatrix(kind="fisher", matrix=out, batch_id=batch_id)
    probs = models.forward(spec, theta, batch).probs
    n_classes = spec.widths[-1] if spec.kind == "mlp-softmax-ce" else 2
    for label in range(n_classes):
        rows = models.relabelled_jacobian(
            spec, theta, batch, np.full(n, label, dtype=np.int64)
        )
        if spec.kind == "mlp-softmax-ce":
            weight = probs[:, label]
        else:
            weight = probs if label == 1 else 1.0 - probs
        out += rows.T @ (weight[:, None] * rows)
    return CurvatureMatrix(kind="fisher", matrix=out, batch_id=batch_id)


def build_ef(lin: BatchLinearization, batch_id: str | None = None) -> CurvatureMatrix:
    """Outer-product curvature ``J^T J`` of per-sample loss gradients."""
    return CurvatureMatrix(
        kind="ef", matrix=lin.jacobian.T @ lin.jacobian, batch_id=batch_id
    )


def build_ief(lin: BatchLinearization, batch_id: str | None = None) -> CurvatureMatrix:
    """Rescaled outer-product curvature ``J^T diag(s)^-1 J``.

    Each row's outer product is divided by the sample's squared logit-space
    gradient norm, which turns the build into the Gauss-Newton matrix of the
    model-predicted residuals.  Vanishing norms make the division
    meaningless, so they raise :class:`ZeroScale`.
    """
    sq = lin.logit_sqnorms
    if np.any(sq < 1e-300):
        raise ZeroScale("a per-sample squared logit-gradient norm is zero")
    weighted = lin.jacobian / sq[:, None]
    return CurvatureMatrix(
        kind="ief", matrix=lin.jacobian.T @ weighted, batch_id=batch_id
    )


def woodfisher_recursion(
    lin: BatchLinearization, variant: str = "ef", batch_id: str | None = None
) -> CurvatureMatrix:
    """Accumulate the batch-mean curvature one rank-one term at a time.

    This is the streaming construction used by pruning-style applications:
    starting from zero, add ``(1/n)`` times each row's outer product (rows
    rescaled by their inverse logit-space norms for the ``ief`` variant).
    The result must match the dense build divided by the batch size; the
    sequential loop is kept deliberately so tests can compare the two routes.
    """
    if variant not in ("ef", "ief"):
        raise ValueError(f"variant must be 'ef' or 'ief', got {variant!r}")
    rows = lin.jacobian
    n = rows.shape[0]
    if variant == "ief":
        sq = lin.logit_sqnorms
        if np.any(sq < 1e-300):
            raise ZeroScale("a per-sample squared logit-gradient norm is zero")
        rows = rows / np.sqrt(sq)[:, None]
    out = np.zeros((rows.shape[1], rows.shape[1]))
    for row in rows:
        out += np.outer(row, row) / n
    return CurvatureMatrix(
        kind=f"woodfisher-{variant}", matrix=out, batch_id=batch_id
    )


def build_kfac_factors(
    layer_inputs: np.ndarray,
    output_grads: np.ndarray,
    logit_sqnorms: np.ndarray | None = None,
    variant: str = "ekfac",
) -> KroneckerFactorPair:
    """Kronecker factors of one layer's curvature block.

    Parameters
    ----------
    layer_inputs : ndarray, shape (n, m)
        Activations entering the layer.
    output_grads : ndarray, shape (n, k)
        Per-sample loss gradients at the layer's pre-activation output.  For
        the ``kfac`` variant these must come from sampled labels.
    logit_sqnorms : ndarray, optional
        Squared logit-space gradient norms, required by ``iekfac``.
    variant : str
        ``ekfac`` (raw rows), ``iekfac`` (rows rescaled by inverse norms), or
        ``kfac`` (rows from sampled labels, same arithmetic as ``ekfac``).

    Notes
    -----
    With a single sample the Kronecker product of the two factors is exactly
    the layer's weight block of the corresponding dense curvature; the
    factorisation only approximates once the expectation over samples stops
    factorising.  The flat layout stacks each weight row contiguously, so
    the block ordering is output-index major, matching the product order
    ``output_factor (x) input_factor``.
    """
    if variant not in ("ekfac", "iekfac", "kfac"):
        raise ValueError(f"unknown variant {variant!r}")
    a = np.asarray(layer_inputs, dtype=np.float64)
    g = np.asarray(output_grads, dtype=np.float64)
    if a.ndim != 2 or g.ndim != 2 or a.shape[0] != g.shape[0]:
        raise ValueError(
            f"layer inputs {a.shape} and output grads {g.shape} must share "
            "a leading sample dimension"
        )
    n = a.shape[0]
    if variant == "iekfac":
        if logit_sqnorms is None:
            raise ZeroScale("iekfac needs per-sample squared logit-gradient norms")
        sq = np.asarray(logit_sqnorms, dtype=np.float64)
        if np.any(sq < 1e-300):
            raise ZeroScale("a per-sample squared logit-gradient norm is zero")
        output_factor = g.T @ (g / sq[:, None]) / n
    else:
        output_factor = g.T @ g / n
    return KroneckerFactorPair(
        input_factor=a.T @ a / n, output_factor=output_factor, variant=variant
    )
