"""Tests for the toy-problem vector fields and trajectories."""

import csv
import json

import numpy as np
import pytest

from natgrad import models, toyviz
from natgrad.toyviz import GridConfig


def lls():
    return models.lls_toy()


class TestToyDirection:
    def test_frozen_directions_at_reference_point(self):
        spec, batch = lls()
        theta = np.array([1.0, 1.0])
        expected = {
            "sgd": [3.0, 2.0],
            "ngd": [1.0, 1.0],
            "ief": [1.0, 1.0],
            "ef": [1.0, -0.5],
        }
        for method, want in expected.items():
            got, degenerate = toyviz.toy_direction(spec, batch, theta, method)
            np.testing.assert_allclose(got, want, atol=1e-12)
            assert not degenerate, method

    def test_frozen_logistic_directions_at_origin(self):
        spec, batch = models.logistic_toy()
        theta = np.zeros(2)
        # at the origin both class probabilities are exactly one half, where
        # the outer-product curvature coincides with the exact curvature
        for method, want in {"ngd": [2.0, -2.0], "ef": [2.0, -2.0], "ief": [0.5, -0.5]}.items():
            got, degenerate = toyviz.toy_direction(spec, batch, theta, method)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
            assert not degenerate

    def test_degenerate_line_flags_and_fallback(self):
        spec, batch = lls()
        on_line = np.array([0.0, 1.0])
        for method in ("ief", "ef"):
            got, degenerate = toyviz.toy_direction(spec, batch, on_line, method)
            assert degenerate
            np.testing.assert_allclose(got, [0.5, 0.5], atol=1e-12)
        got, degenerate = toyviz.toy_direction(spec, batch, on_line, "ngd")
        assert not degenerate
        np.testing.assert_allclose(got, [0.0, 1.0], atol=1e-12)

    def test_equal_reduction_rule_blows_up_near_line(self):
        spec, batch = lls()
        near = np.array([0.1, 1.0])
        ef_norm = np.linalg.norm(toyviz.toy_direction(spec, batch, near, "ef")[0])
        ief_norm = np.linalg.norm(toyviz.toy_direction(spec, batch, near, "ief")[0])
        assert ef_norm > 10.0 * ief_norm

    def test_far_converged_logistic_cell(self):
        # both samples confidently correct at (-2, 2) with equal per-sample
        # gradient scales, so the two outer-product directions are parallel
        # and their magnitudes differ by exactly that common scale
        spec, batch = models.logistic_toy()
        theta = np.array([-2.0, 2.0])
        ef, _ = toyviz.toy_direction(spec, batch, theta, "ef")
        ief, _ = toyviz.toy_direction(spec, batch, theta, "ief")
        scale = (1.0 / (1.0 + np.exp(2.0))) ** 2
        ratio = np.linalg.norm(ef) / np.linalg.norm(ief)
        np.testing.assert_allclose(ratio, 1.0 / scale, rtol=1e-10)
        assert ratio > 10.0
        cosine = ef @ ief / (np.linalg.norm(ef) * np.linalg.norm(ief))
        np.testing.assert_allclose(cosine, 1.0, atol=1e-12)

    def test_unknown_method(self):
        spec, batch = lls()
        with pytest.raises(ValueError):
            toyviz.toy_direction(spec, batch, np.zeros(2), "newton")


class TestFieldGrids:
    def test_grid_config_validation(self):
        with pytest.raises(ValueError):
            GridConfig(lo=1.0, hi=-1.0)
        with pytest.raises(ValueError):
            GridConfig(points=1)
        np.testing.assert_allclose(GridConfig(points=5).axis(), [-2, -1, 0, 1, 2])

    def test_default_grid_shape_and_methods(self):
        rows, meta = toyviz.lls_toy_field(GridConfig(points=5), methods=("sgd", "ngd"))
        assert len(rows) == 2 * 25
        assert {r.method for r in rows} == {"sgd", "ngd"}
        assert meta["toy"] == "linear-least-squares"
        assert meta["grid"] == {"lo": -2.0, "hi": 2.0, "points": 5}
        assert [g["coeffs"] for g in meta["guide_lines"]] == [[1.0, 0.0], [1.0, 1.0]]

    def test_degenerate_cells_are_exactly_the_guide_lines(self):
        rows, _ = toyviz.lls_toy_field()
        for method, expected in (("ief", 81), ("ef", 81), ("ngd", 0), ("sgd", 1)):
            flagged = [
                (r.theta0, r.theta1)
                for r in rows
                if r.method == method and r.degenerate
            ]
            assert len(flagged) == expected, method
        ief_flagged = {
            (r.theta0, r.theta1)
            for r in rows
            if r.method == "ief" and r.degenerate
        }
        for a, b in ief_flagged:
            assert abs(a) < 1e-9 or abs(a + b) < 1e-9

    def test_rescaled_rule_matches_exact_direction_off_the_lines(self):
        rows, _ = toyviz.lls_toy_field(GridConfig(points=21), methods=("ngd", "ief"))
        ngd = {
            (r.theta0, r.theta1): np.array([r.d0, r.d1])
            for r in rows
            if r.method == "ngd"
        }
        for r in rows:
            if r.method == "ief" and not r.degenerate:
                np.testing.assert_allclose(
                    [r.d0, r.d1], ngd[(r.theta0, r.theta1)], atol=1e-10
                )

    def test_logistic_grid_has_no_degenerate_cells(self):
        rows, meta = toyviz.logistic_toy_field(GridConfig(points=11))
        assert not any(r.degenerate for r in rows)
        assert meta["toy"] == "logistic-binary"
        assert [g["coeffs"] for g in meta["guide_lines"]] == [[1.0, 0.0], [1.0, 2.0]]

    def test_loss_column_matches_model(self):
        rows, _ = toyviz.lls_toy_field(GridConfig(points=3), methods=("sgd",))
        spec, batch = lls()
        for r in rows:
            lin = models.batch_linearize(spec, np.array([r.theta0, r.theta1]), batch)
            np.testing.assert_allclose(r.loss, lin.losses.sum(), rtol=1e-12)


class TestTrajectories:
    def test_exact_curvature_path_is_straight_to_the_optimum(self):
        spec, batch = lls()
        rows = toyviz.trace_trajectories(
            spec, batch, np.array([1.0, 1.0]), methods=("ngd",), max_steps=200
        )
        assert max(abs(r.theta0 - r.theta1) for r in rows) < 1e-9
        reached = next(
            r.step for r in rows if np.hypot(r.theta0, r.theta1) < 0.01
        )
        assert reached <= 142

    def test_step_zero_records_the_start(self):
        spec, batch = lls()
        rows = toyviz.trace_trajectories(
            spec, batch, np.array([1.0, 1.0]), methods=("sgd", "ef"), max_steps=3
        )
        starts = [r for r in rows if r.step == 0]
        assert len(starts) == 2
        assert all(r.theta0 == 1.0 and r.theta1 == 1.0 for r in starts)

    def test_start_at_optimum_does_not_move(self):
        spec, batch = lls()
        rows = toyviz.trace_trajectories(
            spec, batch, np.zeros(2), methods=("ngd",), max_steps=50
        )
        assert len(rows) == 1
        assert rows[0].step == 0
        assert rows[0].loss == 0.0

    def test_paths_from_offset_start(self):
        spec, batch = lls()
        rows = toyviz.trace_trajectories(
            spec,
            batch,
            np.array([1.5, -1.0]),
            methods=toyviz.TOY_METHODS,
            max_steps=120,
        )
        paths = {
            method: [r for r in rows if r.method == method]
            for method in toyviz.TOY_METHODS
        }
        for method in ("sgd", "ngd", "ief"):
            assert paths[method][-1].loss < 0.2 * paths[method][0].loss, method
        # the equal-reduction rule instead walks to the nearest single-sample
        # solution line and stalls there with most of the loss remaining
        end = paths["ef"][-1]
        assert abs(end.theta0 + end.theta1) < 0.05
        assert end.loss > 0.5 * paths["ef"][0].loss


class TestCsvOutput:
    def test_field_csv_and_sidecar(self, tmp_path):
        rows, meta = toyviz.lls_toy_field(GridConfig(points=3), methods=("ief",))
        path = tmp_path / "field.csv"
        toyviz.write_field_csv(path, rows, meta)
        with open(path, newline="") as handle:
            parsed = list(csv.DictReader(handle))
        assert len(parsed) == 9
        assert parsed[0].keys() == {
            "theta0",
            "theta1",
            "loss",
            "method",
            "d0",
            "d1",
            "degenerate_flag",
        }
        corner = next(
            p for p in parsed if float(p["theta0"]) == 2.0 and float(p["theta1"]) == 2.0
        )
        np.testing.assert_allclose(
            [float(corner["d0"]), float(corner["d1"])], [2.0, 2.0], atol=1e-12
        )
        assert corner["degenerate_flag"] == "0"
        sidecar = json.loads((tmp_path / "field.meta.json").read_text())
        assert sidecar == meta

    def test_field_csv_is_deterministic(self, tmp_path):
        rows, meta = toyviz.logistic_toy_field(GridConfig(points=5))
        toyviz.write_field_csv(tmp_path / "one.csv", rows, meta)
        rows2, meta2 = toyviz.logistic_toy_field(GridConfig(points=5))
        toyviz.write_field_csv(tmp_path / "two.csv", rows2, meta2)
        assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()
        assert (tmp_path / "one.meta.json").read_bytes() == (
            tmp_path / "two.meta.json"
        ).read_bytes()

    def test_trajectory_csv_round_trip(self, tmp_path):
        spec, batch = lls()
        rows = toyviz.trace_trajectories(
            spec, batch, np.array([1.0, 1.0]), methods=("ngd",), max_steps=5
        )
        path = tmp_path / "traj.csv"
        toyviz.write_trajectory_csv(path, rows)
        with open(path, newline="") as handle:
            parsed = list(csv.DictReader(handle))
        assert len(parsed) == len(rows)
        assert [int(p["step"]) for p in parsed] == [r.step for r in rows]
        assert float(parsed[3]["loss"]) == rows[3].loss
