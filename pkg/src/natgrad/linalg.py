"""Dense symmetric solves shared by every curvature-preconditioned update.

All preconditioners in this package reduce to one of two primitives: a
parameter-space solve against a symmetric positive (semi-)definite matrix, or
a sample-space solve against a small Gram matrix that is then lifted back
through the Jacobian.  Both live here so that the damping-retry policy and the
symmetry checks are identical everywhere.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

SYMMETRY_RTOL = 1e-10


class LinalgError(Exception):
    """Base class for solver failures."""


class NotSquare(LinalgError):
    """Matrix handed to a symmetric solve is not square."""


class NotSymmetric(LinalgError):
    """Matrix is square but asymmetric beyond the relative tolerance."""


class SingularAfterRidge(LinalgError):
    """Cholesky failed at the requested ridge and once more at ridge * 10."""


def _check_symmetric_square(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {a.shape}")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale > 0.0:
        skew = float(np.max(np.abs(a - a.T)))
        if skew > SYMMETRY_RTOL * scale:
            raise NotSymmetric(
                f"matrix asymmetry {skew:.3e} exceeds {SYMMETRY_RTOL:.0e} "
                f"relative to max entry {scale:.3e}"
            )
    return a


def solve_spd(a: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(a + ridge * I) x = b`` for symmetric positive definite ``a``.

    Parameters
    ----------
    a : ndarray, shape (n, n)
        Symmetric matrix.  Asymmetry above ``1e-10`` relative to the largest
        entry is rejected rather than silently symmetrised.
    b : ndarray, shape (n,) or (n, k)
        Right-hand side(s).
    ridge : float, optional
        Non-negative diagonal shift added before factorisation.

    Returns
    -------
    ndarray
        Solution with the same trailing shape as ``b``.

    Raises
    ------
    NotSquare, NotSymmetric
        If ``a`` fails the shape or symmetry preconditions.
    SingularAfterRidge
        If Cholesky fails at ``ridge`` and again at ``ridge * 10``.

    Notes
    -----
    Factorisation is a Cholesky decomposition; one automatic retry at ten
    times the requested ridge covers the common case of a semidefinite matrix
    whose smallest eigenvalue sits just below rounding noise.
    """
    a = _check_symmetric_square(a)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise NotSquare(
            f"rhs leading dimension {b.shape[0]} does not match matrix size {a.shape[0]}"
        )
    for attempt_ridge in (ridge, ridge * 10.0):
        shifted = a if attempt_ridge == 0.0 else a + attempt_ridge * np.eye(a.shape[0])
        try:
            factor = scipy.linalg.cho_factor(shifted, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            continue
        return scipy.linalg.cho_solve(factor, b, check_finite=False)
    raise SingularAfterRidge(
        f"Cholesky failed at ridge {ridge:.3e} and {ridge * 10.0:.3e}"
    )


def woodbury_solve(j: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    """Evaluate ``j.T @ inv(j @ j.T + ridge * I) @ rhs`` through the Gram matrix.

    Parameters
    ----------
    j : ndarray, shape (n, p)
        Tall-or-wide matrix whose row count ``n`` is the cheap dimension.
    rhs : ndarray, shape (n,)
        Sample-space right-hand side.
    ridge : float
        Non-negative damping added to the Gram matrix.

    Returns
    -------
    ndarray, shape (p,)
        Parameter-space result.

    Notes
    -----
    This is the low-rank route for updates whose curvature is ``j.T @ j``:
    by the push-through identity,
    ``inv(j.T @ j + ridge * I) @ j.T = j.T @ inv(j @ j.T + ridge * I)``,
    so an ``n x n`` factorisation replaces a ``p x p`` one.
    """
    j = np.asarray(j, dtype=np.float64)
    if j.ndim != 2:
        raise NotSquare(f"expected a 2-d matrix, got shape {j.shape}")
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (j.shape[0],):
        raise NotSquare(
            f"rhs shape {rhs.shape} does not match row count {j.shape[0]}"
        )
    gram = j @ j.T
    return j.T @ solve_spd(gram, rhs, ridge=ridge)


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product of two 2-d arrays (thin wrapper for a stable import site)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise NotSquare(f"kron expects 2-d factors, got shapes {a.shape} and {b.shape}")
    return np.kron(a, b)
