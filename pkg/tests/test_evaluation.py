"""Tests for the update-quality score, method comparison, and sweeps."""

import csv
import warnings

import numpy as np
import pytest

from natgrad import evaluation, models, updates
from natgrad.evaluation import OrthogonalUpdate, SweepGrid
from natgrad.models import Batch, BatchLinearization
from natgrad.updates import DegenerateRowWarning, UpdateRequest

from _oracles import random_search_gamma

ROOT5 = np.sqrt(5.0)
GAMMA_SGD_TOY = np.sqrt(34.0) / 13.0
GAMMA_BEST_TOY = 1.0 / ROOT5
RATIO_TOY = 13.0 / np.sqrt(170.0)


def toy_state():
    spec, batch = models.lls_toy()
    theta = np.array([1.0, 1.0])
    lin = models.batch_linearize(spec, theta, batch)
    fvp = evaluation.make_fvp(spec, theta, batch)
    return spec, theta, batch, lin, fvp


class TestGamma:
    def test_frozen_toy_values(self):
        _, _, _, lin, fvp = toy_state()
        got_sgd = evaluation.gamma(fvp, lin.total_grad, lin.total_grad)
        got_best = evaluation.gamma(fvp, lin.total_grad, np.array([1.0, 1.0]))
        np.testing.assert_allclose(got_sgd, GAMMA_SGD_TOY, rtol=1e-12)
        np.testing.assert_allclose(got_best, GAMMA_BEST_TOY, rtol=1e-12)
        np.testing.assert_allclose(got_best / got_sgd, RATIO_TOY, rtol=1e-12)

    def test_invariant_to_positive_rescaling(self):
        _, _, _, lin, fvp = toy_state()
        direction = np.array([0.3, -1.7])
        one = evaluation.gamma(fvp, lin.total_grad, direction)
        np.testing.assert_allclose(
            evaluation.gamma(fvp, lin.total_grad, 250.0 * direction), one, rtol=1e-12
        )
        np.testing.assert_allclose(
            evaluation.gamma(fvp, lin.total_grad, -direction), one, rtol=1e-12
        )

    def test_zero_direction_raises(self):
        _, _, _, lin, fvp = toy_state()
        with pytest.raises(OrthogonalUpdate):
            evaluation.gamma(fvp, lin.total_grad, np.zeros(2))

    def test_orthogonal_direction_raises(self):
        _, _, _, lin, fvp = toy_state()
        # total gradient is (3, 2); (2, -3) has exactly zero overlap
        with pytest.raises(OrthogonalUpdate):
            evaluation.gamma(fvp, lin.total_grad, np.array([2.0, -3.0]))

    def test_roundoff_negative_quadratic_clamped(self):
        grad = np.array([1.0, 0.0])
        noisy_fvp = lambda v: -1e-18 * v
        assert evaluation.gamma(noisy_fvp, grad, grad) == 0.0

    def test_exact_direction_minimises_score(self):
        _, _, _, lin, fvp = toy_state()
        fisher = np.array([[2.0, 1.0], [1.0, 1.0]])
        best = np.linalg.solve(fisher, lin.total_grad)
        best_score = evaluation.gamma(fvp, lin.total_grad, best)
        # closed-form minimum of the score is 1 / sqrt(g' F^-1 g)
        np.testing.assert_allclose(
            best_score, 1.0 / np.sqrt(lin.total_grad @ best), rtol=1e-12
        )

        def score(direction):
            try:
                return evaluation.gamma(fvp, lin.total_grad, direction)
            except OrthogonalUpdate:
                return np.inf

        searched = random_search_gamma(score, dim=2, rng=np.random.default_rng(3))
        assert searched >= best_score - 1e-12


class TestLqaPrediction:
    def test_toy_prediction_matches_exact_line_search(self):
        spec, theta, batch, lin, fvp = toy_state()
        direction = np.array([1.0, 1.0])
        score = evaluation.gamma(fvp, lin.total_grad, direction)
        predicted = evaluation.lqa_predicted_reduction(score)
        np.testing.assert_allclose(predicted, 2.5, rtol=1e-12)
        # quadratic loss, so the predicted reduction is achieved exactly
        step = (direction @ lin.total_grad) / (direction @ fvp(direction))
        after = models.batch_linearize(spec, theta - step * direction, batch)
        drop = lin.losses.sum() - after.losses.sum()
        np.testing.assert_allclose(drop, predicted, rtol=1e-12, atol=1e-12)

    def test_smaller_score_predicts_larger_reduction(self):
        assert evaluation.lqa_predicted_reduction(
            0.3
        ) > evaluation.lqa_predicted_reduction(0.5)

    def test_rejects_nonpositive_score(self):
        with pytest.raises(ValueError):
            evaluation.lqa_predicted_reduction(0.0)
        with pytest.raises(ValueError):
            evaluation.lqa_predicted_reduction(-1.0)


def fake_linearization(jacobian):
    jacobian = np.asarray(jacobian, dtype=np.float64)
    n = jacobian.shape[0]
    return BatchLinearization(
        losses=np.zeros(n),
        jacobian=jacobian,
        logit_sqnorms=np.zeros(n),
        total_grad=jacobian.sum(axis=0),
        probs=np.zeros(n),
        logits=np.zeros(n),
    )


class TestGradNormImbalance:
    def test_frozen_toy_value(self):
        _, _, _, lin, _ = toy_state()
        np.testing.assert_allclose(
            evaluation.grad_norm_imbalance(lin), 2.0 * np.sqrt(2.0), rtol=1e-12
        )

    def test_frozen_logistic_value(self):
        spec, batch = models.logistic_toy()
        lin = models.batch_linearize(spec, np.zeros(2), batch)
        np.testing.assert_allclose(
            evaluation.grad_norm_imbalance(lin), np.sqrt(5.0), rtol=1e-12
        )

    def test_ignores_degenerate_rows(self):
        lin = fake_linearization([[3.0, 4.0], [0.5, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(evaluation.grad_norm_imbalance(lin), 10.0)

    def test_all_degenerate_raises(self):
        with pytest.raises(ValueError):
            evaluation.grad_norm_imbalance(fake_linearization([[0.0, 0.0]]))


class TestEvaluateMethods:
    def requests(self):
        return [
            UpdateRequest("sgd"),
            UpdateRequest("ief", damping=1e-12),
            UpdateRequest("ef", damping=1e-12),
            UpdateRequest("ngd-exact", damping=1e-12),
            UpdateRequest("ngd-cg", cg_iters=2),
        ]

    def test_toy_scores_and_ratios(self):
        spec, theta, batch, _, _ = toy_state()
        result = evaluation.evaluate_methods(
            spec, theta, [batch], self.requests(), checkpoint="toy"
        )
        by_method = {r.method: r for r in result.reports}
        assert all(r.status == "ok" for r in result.reports)
        assert all(r.checkpoint == "toy" for r in result.reports)
        np.testing.assert_allclose(by_method["sgd"].gamma, GAMMA_SGD_TOY, rtol=1e-9)
        np.testing.assert_allclose(by_method["ief"].gamma, GAMMA_BEST_TOY, rtol=1e-9)
        np.testing.assert_allclose(
            by_method["ief"].gamma_ratio_sgd, RATIO_TOY, rtol=1e-9
        )
        np.testing.assert_allclose(
            by_method["ef"].gamma, np.sqrt(1.25) / 2.0, rtol=1e-9
        )
        np.testing.assert_allclose(
            by_method["sgd"].imbalance, 2.0 * np.sqrt(2.0), rtol=1e-12
        )
        # two iterations of conjugate gradients solve the 2-parameter system
        np.testing.assert_allclose(
            by_method["ngd-cg"].gamma, by_method["ngd-exact"].gamma, rtol=1e-9
        )

    def test_exact_direction_scores_no_worse(self):
        spec, theta, batch, _, _ = toy_state()
        result = evaluation.evaluate_methods(spec, theta, [batch], self.requests())
        exact = result.summaries["ngd-exact"].mean_gamma
        for method, summary in result.summaries.items():
            assert exact <= summary.mean_gamma + 1e-12, method

    def test_sampled_curvature_on_classifier(self):
        spec, batch = models.logistic_toy()
        theta = np.array([0.3, -0.2])
        result = evaluation.evaluate_methods(
            spec,
            theta,
            [batch, batch],
            [UpdateRequest("sgd"), UpdateRequest("sf", damping=1e-3, seed=5)],
        )
        summary = result.summaries["sf"]
        assert summary.n_ok == 2
        assert np.isfinite(summary.mean_ratio)

    def test_report_grid_is_complete(self):
        spec, theta, batch, _, _ = toy_state()
        batches = [batch, batch, batch]
        result = evaluation.evaluate_methods(spec, theta, batches, self.requests())
        assert len(result.reports) == len(batches) * len(self.requests())
        for summary in result.summaries.values():
            assert summary.n_ok == len(batches)
        np.testing.assert_allclose(result.summaries["sgd"].mean_ratio, 1.0)
        assert result.summaries["sgd"].std_ratio == 0.0

    def test_requires_sgd_baseline(self):
        spec, theta, batch, _, _ = toy_state()
        with pytest.raises(ValueError, match="sgd"):
            evaluation.evaluate_methods(spec, theta, [batch], [UpdateRequest("ef")])

    def test_rejects_duplicates_and_unknown_methods(self):
        spec, theta, batch, _, _ = toy_state()
        with pytest.raises(ValueError, match="duplicate"):
            evaluation.evaluate_methods(
                spec, theta, [batch], [UpdateRequest("sgd"), UpdateRequest("sgd")]
            )
        with pytest.raises(ValueError, match="unknown"):
            evaluation.evaluate_methods(
                spec, theta, [batch], [UpdateRequest("sgd"), UpdateRequest("mystery")]
            )

    def test_converged_batch_reports_failure_not_crash(self):
        spec, _, batch, _, _ = toy_state()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateRowWarning)
            result = evaluation.evaluate_methods(
                spec,
                np.zeros(2),
                [batch],
                [UpdateRequest("sgd"), UpdateRequest("ef")],
            )
        assert [r.status for r in result.reports] == [
            "OrthogonalUpdate",
            "OrthogonalUpdate",
        ]
        assert result.summaries["ef"].n_ok == 0
        assert np.isnan(result.summaries["ef"].mean_ratio)

    def test_deterministic(self):
        spec, batch = models.logistic_toy()
        theta = np.array([0.3, -0.2])
        requests = [UpdateRequest("sgd"), UpdateRequest("sf", damping=1e-3, seed=9)]
        one = evaluation.evaluate_methods(spec, theta, [batch], requests)
        two = evaluation.evaluate_methods(spec, theta, [batch], requests)
        assert one.reports == two.reports


class TestDampingSweep:
    def test_frozen_toy_ratios_at_small_damping(self):
        spec, theta, batch, _, _ = toy_state()
        rows = evaluation.damping_sweep(
            spec, theta, [batch], SweepGrid(dampings=(1e-10,)), methods=("ef", "ief")
        )
        by_method = {r.method: r for r in rows}
        np.testing.assert_allclose(
            by_method["ief"].mean_ratio, RATIO_TOY, rtol=1e-8
        )
        np.testing.assert_allclose(
            by_method["ef"].mean_ratio,
            (np.sqrt(1.25) / 2.0) / GAMMA_SGD_TOY,
            rtol=1e-8,
        )

    def test_heavy_damping_recovers_gradient_direction(self):
        spec, theta, batch, _, _ = toy_state()
        rows = evaluation.damping_sweep(
            spec, theta, [batch], SweepGrid(dampings=(1e8,)), methods=("ef",)
        )
        np.testing.assert_allclose(rows[0].mean_ratio, 1.0, atol=1e-6)
        lspec, lbatch = models.logistic_toy()
        rows = evaluation.damping_sweep(
            lspec,
            np.array([0.3, -0.2]),
            [lbatch],
            SweepGrid(dampings=(1e9,)),
            methods=("sf",),
            seed=2,
        )
        np.testing.assert_allclose(rows[0].mean_ratio, 1.0, atol=1e-6)

    def test_row_grid_and_batch_cap(self):
        spec, theta, batch, _, _ = toy_state()
        grid = SweepGrid(dampings=(1e-8, 1e-4, 1.0), batches_per_point=2)
        rows = evaluation.damping_sweep(
            spec, theta, [batch, batch, batch], grid, methods=("ef", "ief")
        )
        assert len(rows) == 6
        assert all(r.n_ok == 2 for r in rows)
        assert all(r.status == "ok" for r in rows)

    def test_rejects_unsupported_method(self):
        spec, theta, batch, _, _ = toy_state()
        with pytest.raises(ValueError):
            evaluation.damping_sweep(
                spec, theta, [batch], SweepGrid(dampings=(1e-4,)), methods=("sgd",)
            )

    def test_gradient_free_batches_leave_empty_rows(self):
        spec, _, batch, _, _ = toy_state()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateRowWarning)
            rows = evaluation.damping_sweep(
                spec, np.zeros(2), [batch], SweepGrid(dampings=(1e-4,)), methods=("ef",)
            )
        assert rows[0].status == "empty"
        assert rows[0].n_ok == 0
        assert np.isnan(rows[0].mean_ratio)

    def test_deterministic(self):
        lspec, lbatch = models.logistic_toy()
        theta = np.array([0.3, -0.2])
        grid = SweepGrid(dampings=(1e-3, 1e-1))
        one = evaluation.damping_sweep(lspec, theta, [lbatch], grid, methods=("sf",), seed=4)
        two = evaluation.damping_sweep(lspec, theta, [lbatch], grid, methods=("sf",), seed=4)
        assert one == two


class TestCsvWriters:
    def test_indicator_csv_round_trip(self, tmp_path):
        spec, theta, batch, _, _ = toy_state()
        result = evaluation.evaluate_methods(
            spec,
            theta,
            [batch],
            [UpdateRequest("sgd"), UpdateRequest("ief", damping=1e-12)],
            checkpoint="epoch003",
        )
        path = tmp_path / "indicator.csv"
        evaluation.write_indicator_csv(path, result.reports)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2
        assert rows[0]["checkpoint"] == "epoch003"
        assert rows[0]["method"] == "sgd"
        assert rows[0]["gamma_ratio_sgd"] == ""
        # repr-formatted floats parse back bit-exactly
        assert float(rows[1]["gamma"]) == result.reports[1].gamma
        assert float(rows[1]["gamma_ratio_sgd"]) == result.reports[1].gamma_ratio_sgd
        assert rows[1]["status"] == "ok"

    def test_sweep_csv_round_trip(self, tmp_path):
        spec, theta, batch, _, _ = toy_state()
        rows_in = evaluation.damping_sweep(
            spec, theta, [batch], SweepGrid(dampings=(1e-6, 1e-2)), methods=("ef",)
        )
        path = tmp_path / "sweep.csv"
        evaluation.write_sweep_csv(path, rows_in)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [r["damping"] for r in rows] == ["1e-06", "0.01"]
        assert float(rows[0]["mean_ratio"]) == rows_in[0].mean_ratio
        assert rows[0]["status"] == "ok"
