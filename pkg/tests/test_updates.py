"""Update rules: Gram-route identities, reduction laws, CG reference, profiles."""

import numpy as np
import pytest
from _oracles import svd_ridge_solve

from natgrad import curvature, models, updates


def lls_lin(theta=(1.0, 1.0)):
    spec, batch = models.lls_toy()
    return models.batch_linearize(spec, np.asarray(theta, dtype=float), batch)


def logistic_lin(theta=(0.0, 0.0)):
    spec, batch = models.logistic_toy()
    return models.batch_linearize(spec, np.asarray(theta, dtype=float), batch)


def random_lsq_instance(rng, n=None, p=None):
    n = n or int(rng.integers(2, 7))
    p = p or int(2 * n + rng.integers(2, 8))
    spec = models.ModelSpec(kind="linear-least-squares", widths=(p - 1,))
    theta = rng.standard_normal(p)
    batch = models.Batch(
        features=rng.standard_normal((n, p - 1)),
        targets=rng.standard_normal(n),
    )
    return spec, theta, batch


def square_lsq_instance(rng, p=5):
    """Square full-rank instance: the exact-curvature solve is well posed.

    The sample count equals the parameter count, so both the Gram matrix and
    the dense curvature are invertible and the two solve routes converge to
    the same limit as damping vanishes.  Residuals are forced away from zero
    (they enter the rescaled rule inversely) and the feature matrix is kept
    well-conditioned by resampling.
    """
    spec = models.ModelSpec(kind="linear-least-squares", widths=(p - 1,))
    theta = rng.standard_normal(p)
    while True:
        feats = rng.standard_normal((p, p - 1))
        phi = np.hstack([np.ones((p, 1)), feats])
        if np.linalg.cond(phi) < 100.0:
            break
    z = phi @ theta
    residuals = rng.uniform(0.3, 1.5, size=p) * rng.choice([-1.0, 1.0], size=p)
    batch = models.Batch(features=feats, targets=z - residuals)
    return spec, theta, batch


class TestTraceDamping:
    def test_frozen_toy_value(self):
        # Squared Frobenius norm of [[1,0],[2,2]] is 9; over two samples at
        # scale 1e-10 that is 4.5e-10.
        lin = lls_lin()
        assert updates.trace_damping(lin.jacobian, 1e-10) == pytest.approx(4.5e-10)

    def test_default_scale(self):
        lin = lls_lin()
        assert updates.trace_damping(lin.jacobian) == pytest.approx(4.5e-12)


class TestEfUpdate:
    def test_frozen_toy_direction(self):
        out = updates.ef_update(lls_lin(), damping=0.0)
        np.testing.assert_allclose(out.direction, [1.0, -0.5], atol=1e-12)

    def test_frozen_logistic_direction(self):
        out = updates.ef_update(logistic_lin(), damping=0.0)
        np.testing.assert_allclose(out.direction, [2.0, -2.0], atol=1e-12)

    def test_equal_reduction_law(self):
        # First-order reduction J @ d approaches one per retained sample.
        rng = np.random.default_rng(31)
        for _ in range(30):
            spec, theta, batch = random_lsq_instance(rng)
            lin = models.batch_linearize(spec, theta, batch)
            lam = updates.trace_damping(lin.jacobian, 1e-10)
            out = updates.ef_update(lin, damping=lam)
            assert np.abs(lin.jacobian @ out.direction - 1.0).max() <= 1e-4

    def test_single_sample_closed_form(self):
        rng = np.random.default_rng(5)
        spec, theta, batch = random_lsq_instance(rng, n=1, p=6)
        lin = models.batch_linearize(spec, theta, batch)
        row = lin.jacobian[0]
        lam = 1e-6
        out = updates.ef_update(lin, damping=lam)
        np.testing.assert_allclose(
            out.direction, row / (row @ row + lam), rtol=1e-12
        )

    def test_matches_dense_route(self):
        rng = np.random.default_rng(77)
        for _ in range(20):
            spec, theta, batch = random_lsq_instance(rng)
            lin = models.batch_linearize(spec, theta, batch)
            for lam in (1e-8, 1e-4, 1.0):
                low = updates.ef_update(lin, damping=lam).direction
                dense = svd_ridge_solve(lin.jacobian, np.ones(len(batch)), lam)
                np.testing.assert_allclose(
                    low, dense, rtol=1e-8, atol=1e-10 * np.abs(dense).max()
                )

    def test_degenerate_row_dropped_with_warning(self):
        # At (0, 1) the first toy sample sits on its optimum: zero row.
        lin = lls_lin(theta=(0.0, 1.0))
        with pytest.warns(updates.DegenerateRowWarning):
            out = updates.ef_update(lin, damping=1e-12)
        # Remaining single row (1, 1): direction is its normalised pseudo-inverse.
        np.testing.assert_allclose(out.direction, [0.5, 0.5], rtol=1e-9)

    def test_all_rows_degenerate_returns_zero(self):
        lin = lls_lin(theta=(0.0, 0.0))
        with pytest.warns(updates.DegenerateRowWarning):
            out = updates.ef_update(lin, damping=1e-12)
        np.testing.assert_array_equal(out.direction, 0.0)


class TestIefUpdate:
    def test_frozen_toy_direction_and_step(self):
        lin = lls_lin()
        out = updates.ief_update(lin)
        np.testing.assert_allclose(out.direction, [1.0, 1.0], atol=1e-10)
        landed = np.array([1.0, 1.0]) - out.direction
        assert np.abs(landed).max() <= 1e-10

    def test_frozen_logistic_direction(self):
        out = updates.ief_update(logistic_lin(), damping=0.0)
        np.testing.assert_allclose(out.direction, [0.5, -0.5], atol=1e-12)

    def test_scaled_reduction_law(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            spec, theta, batch = random_lsq_instance(rng)
            lin = models.batch_linearize(spec, theta, batch)
            lam = updates.trace_damping(lin.jacobian, 1e-10)
            out = updates.ief_update(lin, damping=lam)
            gap = np.abs(lin.jacobian @ out.direction - lin.logit_sqnorms).max()
            assert gap <= 1e-4 * lin.logit_sqnorms.max()

    def test_equals_exact_update_for_least_squares(self):
        rng = np.random.default_rng(99)
        for _ in range(25):
            spec, theta, batch = square_lsq_instance(rng)
            lin = models.batch_linearize(spec, theta, batch)
            lam = updates.trace_damping(lin.jacobian)
            ief = updates.ief_update(lin, damping=lam).direction
            fisher = curvature.build_fisher(spec, theta, batch).matrix
            exact = updates.ngd_exact_update(fisher, lin.total_grad, lam).direction
            np.testing.assert_allclose(ief, exact, rtol=1e-8)


class TestSfUpdate:
    def test_matches_dense_route(self):
        rng = np.random.default_rng(21)
        spec = models.ModelSpec(kind="mlp-softmax-ce", widths=(4, 6, 3))
        theta = models.init_params(spec, seed=1)
        batch = models.Batch(
            features=rng.standard_normal((5, 4)),
            targets=rng.integers(0, 3, size=5),
        )
        lin = models.batch_linearize(spec, theta, batch)
        pseudo = models.sample_pseudo_gradients(spec, theta, batch, seed=3)
        p = spec.n_params
        for lam in (1e-4, 1e-2, 1.0):
            low = updates.sf_update(lin, pseudo.jacobian, damping=lam).direction
            dense = np.linalg.solve(
                pseudo.jacobian.T @ pseudo.jacobian + lam * np.eye(p),
                lin.total_grad,
            )
            np.testing.assert_allclose(
                low, dense, rtol=1e-7, atol=1e-12 * max(1.0, np.abs(dense).max())
            )

    def test_large_damping_recovers_scaled_gradient(self):
        lin = lls_lin()
        pseudo_rows = np.array([[0.3, 0.0], [0.1, 0.2]])
        lam = 1e9
        out = updates.sf_update(lin, pseudo_rows, damping=lam)
        np.testing.assert_allclose(out.direction, lin.total_grad / lam, rtol=1e-8)

    def test_rejects_zero_damping(self):
        lin = lls_lin()
        with pytest.raises(ValueError):
            updates.sf_update(lin, lin.jacobian, damping=0.0)


class TestNgdCgUpdate:
    def test_solves_at_full_iteration_count(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            p = int(rng.integers(3, 12))
            m = rng.standard_normal((p, p + 3))
            f = m @ m.T + 0.5 * np.eye(p)
            g = rng.standard_normal(p)
            out, trace = updates.ngd_cg_update(lambda v: f @ v, g, cg_iters=p)
            expected = np.linalg.solve(f, g)
            np.testing.assert_allclose(out.direction, expected, rtol=1e-6)
            assert not trace.breakdown or trace.iterations <= p

    def test_gamma_trace_non_increasing(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            p = int(rng.integers(4, 16))
            m = rng.standard_normal((p, p + 2))
            f = m @ m.T + 0.1 * np.eye(p)
            g = rng.standard_normal(p)
            _, trace = updates.ngd_cg_update(
                lambda v: f @ v, g, cg_iters=p, damping=1e-8
            )
            diffs = np.diff(trace.gammas)
            assert (diffs <= 1e-10).all()

    def test_first_iterate_is_gradient_direction(self):
        rng = np.random.default_rng(6)
        p = 8
        m = rng.standard_normal((p, p + 1))
        f = m @ m.T + np.eye(p)
        g = rng.standard_normal(p)
        out, _ = updates.ngd_cg_update(lambda v: f @ v, g, cg_iters=1)
        cosine = out.direction @ g / (
            np.linalg.norm(out.direction) * np.linalg.norm(g)
        )
        assert cosine == pytest.approx(1.0, abs=1e-12)

    def test_zero_gradient_breaks_down_immediately(self):
        out, trace = updates.ngd_cg_update(lambda v: v, np.zeros(4), cg_iters=5)
        assert trace.breakdown
        assert trace.iterations == 0
        np.testing.assert_array_equal(out.direction, 0.0)

    def test_exact_convergence_flags_breakdown(self):
        # Identity curvature converges in one step; the next residual is zero.
        g = np.array([1.0, -2.0, 0.5])
        out, trace = updates.ngd_cg_update(lambda v: v, g, cg_iters=5)
        np.testing.assert_allclose(out.direction, g, atol=1e-14)
        assert trace.breakdown
        assert trace.iterations == 1


class TestProjectionProfile:
    def test_frozen_ef_profile(self):
        # Projections of the limiting outer-product direction (1, -0.5):
        # sample gradients (1,0) and (2,2) give 1 and 1/sqrt(8).
        lin = lls_lin()
        prof = updates.projection_profile(lin, np.array([1.0, -0.5]))
        np.testing.assert_allclose(prof, [1.0, 1.0 / np.sqrt(8.0)], atol=1e-12)

    def test_inverse_scaling_of_ef(self):
        # The equal-reduction law makes projections approach inverse row norms.
        rng = np.random.default_rng(23)
        for _ in range(15):
            spec, theta, batch = random_lsq_instance(rng)
            lin = models.batch_linearize(spec, theta, batch)
            lam = updates.trace_damping(lin.jacobian, 1e-10)
            out = updates.ef_update(lin, damping=lam)
            prof = updates.projection_profile(lin, out.direction)
            np.testing.assert_allclose(prof, 1.0 / lin.row_norms, rtol=1e-3)

    def test_nan_sentinel_for_degenerate_rows(self):
        lin = lls_lin(theta=(0.0, 1.0))
        prof = updates.projection_profile(lin, np.array([1.0, 1.0]))
        assert np.isnan(prof[0])
        assert np.isfinite(prof[1])
