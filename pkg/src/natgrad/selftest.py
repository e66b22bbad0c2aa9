"""Built-in verification suite runnable from an installed package.

Each check re-derives one of the library's load-bearing identities from
scratch, with fixed seeds, and compares against an independent route
(finite differences, a singular-value-decomposition solve, a closed-form
bound).  The point is to catch a broken install or a platform whose
numerics differ, without needing the development test tree.  Tolerances
live in one table and can be overridden, which also makes the harness
itself testable: tightening a tolerance to an impossible value must flip
that check to a failure.
"""

from __future__ import annotations

import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from natgrad import curvature, linalg, models, optim, updates
from natgrad.models import Batch, ModelSpec


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _small_classifier():
    spec = ModelSpec(kind="mlp-softmax-ce", widths=(4, 5, 3))
    rng = np.random.default_rng(41)
    theta = models.init_params(spec, seed=41) + 0.3 * rng.normal(
        size=ModelSpec(kind="mlp-softmax-ce", widths=(4, 5, 3)).n_params
    )
    batch = Batch(
        features=rng.normal(size=(6, 4)), targets=rng.integers(0, 3, size=6)
    )
    return spec, theta, batch


def _square_least_squares(rng):
    # square, well conditioned, residuals bounded away from zero: the regime
    # where the rescaled outer-product update equals the exact one
    n = 5
    while True:
        features = rng.normal(size=(n, n - 1))
        phi = np.hstack([np.ones((n, 1)), features])
        if np.linalg.cond(phi) < 100.0:
            break
    theta = rng.normal(size=n)
    residuals = rng.uniform(0.3, 1.5, size=n) * rng.choice([-1.0, 1.0], size=n)
    targets = phi @ theta - residuals
    spec = ModelSpec(kind="linear-least-squares", widths=(n - 1,))
    return spec, theta, Batch(features=features, targets=targets)


def check_gradient_linearization(tol: float) -> tuple[float, str]:
    spec, theta, batch = _small_classifier()
    lin = models.batch_linearize(spec, theta, batch)
    step = 1e-6
    worst = 0.0
    for j in range(theta.size):
        bumped = theta.copy()
        bumped[j] += step
        plus = models.batch_linearize(spec, bumped, batch).losses
        bumped[j] -= 2 * step
        minus = models.batch_linearize(spec, bumped, batch).losses
        fd = (plus - minus) / (2 * step)
        worst = max(worst, float(np.abs(fd - lin.jacobian[:, j]).max()))
    return worst, f"max finite-difference error {worst:.2e}"

def check_gram_identity(tol: float) -> tuple[float, str]:
    rng = np.random.default_rng(17)
    worst = 0.0
    for ridge in (1e-8, 1e-4, 1.0):
        j = rng.normal(size=(4, 9))
        rhs = rng.normal(size=4)
        through = linalg.woodbury_solve(j, rhs, ridge=ridge)
        u, s, vt = np.linalg.svd(j, full_matrices=False)
        dense = vt.T @ (s / (s * s + ridge) * (u.T @ rhs))
        worst = max(worst, float(np.abs(through - dense).max() / np.abs(dense).max()))
    return worst, f"max mismatch between small-matrix and parameter-space routes {worst:.2e}"

def check_curvature_operator(tol: float) -> tuple[float, str]:
    spec, theta, batch = _small_classifier()
    matrix = curvature.build_fisher(spec, theta, batch).matrix
    dim = theta.size
    probed = np.column_stack(
        [
            models.fisher_vector_product(spec, theta, batch, e)
            for e in np.eye(dim)
        ]
    )
    err = float(np.abs(matrix - probed).max() / np.abs(matrix).max())
    return err, f"matrix build vs operator probe mismatch {err:.2e}"

def check_least_squares_equivalence(tol: float) -> tuple[float, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(5):
        spec, theta, batch = _square_least_squares(rng)
        lin = models.batch_linearize(spec, theta, batch)
        damping = updates.trace_damping(lin.jacobian, scale=1e-12)
        via_gram = updates.ief_update(lin, damping).direction
        fisher = curvature.build_fisher(spec, theta, batch)
        exact = updates.ngd_exact_update(fisher, lin.total_grad, damping).direction
        worst = max(worst, float(np.abs(via_gram - exact).max() / np.abs(exact).max()))
    return worst, f"rescaled update vs exact direction mismatch {worst:.2e}"

def check_equal_reduction(tol: float) -> tuple[float, str]:
    spec, theta, batch = _small_classifier()
    lin = models.batch_linearize(spec, theta, batch)
    direction = updates.ef_update(lin, updates.trace_damping(lin.jacobian)).direction
    reductions = lin.jacobian @ direction
    err = float(np.abs(reductions - reductions.mean()).max() / abs(reductions.mean()))
    return err, f"per-sample first-order reductions spread {err:.2e}"

def check_scaled_reduction(tol: float) -> tuple[float, str]:
    spec, theta, batch = _small_classifier()
    lin = models.batch_linearize(spec, theta, batch)
    direction = updates.ief_update(lin, updates.trace_damping(lin.jacobian)).direction
    ratios = (lin.jacobian @ direction) / lin.logit_sqnorms
    err = float(np.abs(ratios - ratios.mean()).max() / abs(ratios.mean()))
    return err, f"reduction-to-scale ratio spread {err:.2e}"

def check_score_monotone(tol: float) -> tuple[float, str]:
    spec, theta, batch = _small_classifier()
    lin = models.batch_linearize(spec, theta, batch)

    def fvp(v):
        return models.fisher_vector_product(spec, theta, batch, v)

    _, trace = updates.ngd_cg_update(fvp, lin.total_grad, cg_iters=12, damping=1e-6)
    rises = np.diff(np.asarray(trace.gammas))
    worst = float(rises.max()) if rises.size else 0.0
    return worst, f"largest score rise across iterations {worst:.2e}"

def check_probability_bound(tol: float) -> tuple[float, str]:
    spec = ModelSpec(kind="logistic-binary", widths=(1,))
    batch = Batch(features=np.array([[0.0]]), targets=np.array([1]))
    report = optim.ief_flow_bound_check(spec, np.zeros(2), batch, horizon=2.0)
    return -report.min_margin, f"worst bound margin {report.min_margin:.2e}"

def check_loss_derivative_identity(tol: float) -> tuple[float, str]:
    spec, batch = models.lls_toy()
    report = optim.strong_convex_bound_check(
        spec, np.array([1.0, 1.0]), batch, horizon=1.0
    )
    return report.lemma_max_residual, (
        f"worst deviation of loss derivative from its identity "
        f"{report.lemma_max_residual:.2e}"
    )

def check_decay_bound(tol: float) -> tuple[float, str]:
    spec, batch = models.lls_toy()
    report = optim.strong_convex_bound_check(
        spec, np.array([1.0, 1.0]), batch, horizon=1.0
    )
    return abs(report.min_margin), f"decay-envelope margin {report.min_margin:.2e}"

def check_sampled_unbiased(tol: float) -> tuple[float, str]:
    spec, batch = models.logistic_toy()
    theta = np.array([0.3, -0.2])
    fisher = curvature.build_fisher(spec, theta, batch).matrix
    acc = np.zeros_like(fisher)
    draws = 2000
    for seed in range(draws):
        rows = models.sample_pseudo_gradients(spec, theta, batch, seed=seed).jacobian
        acc += rows.T @ rows
    acc /= draws
    err = float(np.abs(acc - fisher).max() / np.abs(fisher).max())
    return err, f"sampled-curvature mean vs exact over {draws} draws {err:.2e}"

def check_checkpoint_roundtrip(tol: float) -> tuple[float, str]:
    theta = np.random.default_rng(9).normal(size=64)
    with tempfile.TemporaryDirectory() as scratch:
        path = Path(scratch) / "state.ckpt"
        optim.save_checkpoint(path, theta, "mlp:4-3:relu")
        back = optim.load_checkpoint(path, "mlp:4-3:relu")
    err = 0.0 if np.array_equal(theta, back) else float(np.abs(theta - back).max())
    return err, f"round-trip discrepancy {err:.2e}"

def check_kron_block(tol: float) -> tuple[float, str]:
    spec = ModelSpec(kind="mlp-softmax-ce", widths=(3, 4, 3))
    rng = np.random.default_rng(23)
    theta = models.init_params(spec, seed=23) + 0.2 * rng.normal(size=spec.n_params)
    batch = Batch(features=rng.normal(size=(1, 3)), targets=np.array([1]))
    terms = models.layer_backprop_terms(spec, theta, batch)
    lin = models.batch_linearize(spec, theta, batch)
    worst = 0.0
    for index, (inputs, grads) in enumerate(terms):
        pair = curvature.build_kfac_factors(inputs, grads, variant="ekfac")
        block = linalg.kron(pair.output_factor, pair.input_factor)
        w_slice, _ = models.layer_param_slices(spec)[index]
        rows = lin.jacobian[:, w_slice]
        exact = rows.T @ rows
        worst = max(
            worst, float(np.abs(block - exact).max() / max(np.abs(exact).max(), 1e-30))
        )
    return worst, f"single-sample factored-block mismatch {worst:.2e}"

def check_batch_recursion(tol: float) -> tuple[float, str]:
    spec, theta, batch = _small_classifier()
    lin = models.batch_linearize(spec, theta, batch)
    recursed = curvature.woodfisher_recursion(lin, variant="ef").matrix
    direct = (lin.jacobian.T @ lin.jacobian) / len(batch)
    err = float(np.abs(recursed - direct).max() / np.abs(direct).max())
    return err, f"streamed vs direct build mismatch {err:.2e}"


@dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    fn: Callable[[float], tuple[float, str]]


CHECKS = (
    Check("gradient-linearization", 1e-4, check_gradient_linearization),
    Check("gram-identity", 1e-8, check_gram_identity),
    Check("curvature-operator", 1e-8, check_curvature_operator),
    Check("least-squares-equivalence", 1e-6, check_least_squares_equivalence),
    Check("equal-reduction", 1e-4, check_equal_reduction),
    Check("scaled-reduction", 1e-4, check_scaled_reduction),
    Check("score-monotone", 1e-10, check_score_monotone),
    Check("probability-bound", 1e-6, check_probability_bound),
    Check("loss-derivative-identity", 1e-3, check_loss_derivative_identity),
    Check("decay-bound", 1e-8, check_decay_bound),
    Check("sampled-unbiased", 2e-2, check_sampled_unbiased),
    Check("checkpoint-roundtrip", 0.0, check_checkpoint_roundtrip),
    Check("kron-block", 1e-10, check_kron_block),
    Check("batch-recursion", 1e-10, check_batch_recursion),
)


def run_selftest(tol_overrides: dict[str, float] | None = None, stream=None) -> int:
    """Run every check, print one line each, and return a process exit code.

    ``tol_overrides`` maps check names to replacement tolerances; unknown
    names are rejected so typos cannot silently skip a check.
    """
    stream = stream or sys.stdout
    overrides = dict(tol_overrides or {})
    known = {c.name for c in CHECKS}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown selftest checks: {sorted(unknown)}")
    results = []
    for check in CHECKS:
        tolerance = overrides.get(check.name, check.tolerance)
        try:
            measured, detail = check.fn(tolerance)
            passed = measured <= tolerance
            detail = f"{detail} (tolerance {tolerance:.0e})"
        except Exception as exc:  # a crash is a failure, not an abort
            passed = False
            detail = f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(check.name, passed, detail))
        marker = "pass" if passed else "FAIL"
        print(f"[ {marker} ] {check.name:28s} {detail}", file=stream)
    failed = sum(not r.passed for r in results)
    print(
        f"{len(results) - failed}/{len(results)} checks passed",
        file=stream,
    )
    return 0 if failed == 0 else 1
