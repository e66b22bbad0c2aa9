"""Tests for the built-in self-check battery."""

import io

import pytest

from natgrad import selftest


class TestRunSelftest:
    def test_all_checks_pass(self):
        stream = io.StringIO()
        assert selftest.run_selftest(stream=stream) == 0
        out = stream.getvalue()
        lines = [line for line in out.splitlines() if "pass" in line and "[" in line]
        assert len(lines) == len(selftest.CHECKS)
        assert f"{len(selftest.CHECKS)}/{len(selftest.CHECKS)} checks passed" in out

    def test_every_check_reports_its_tolerance(self):
        stream = io.StringIO()
        selftest.run_selftest(stream=stream)
        out = stream.getvalue()
        for check in selftest.CHECKS:
            assert check.name in out

    def test_impossible_tolerance_flips_to_failure(self):
        stream = io.StringIO()
        result = selftest.run_selftest(
            tol_overrides={"gradient-linearization": 1e-30}, stream=stream
        )
        assert result == 1
        out = stream.getvalue()
        assert "FAIL" in out
        assert "gradient-linearization" in out

    def test_unknown_override_name_raises(self):
        with pytest.raises(ValueError, match="no-such-check"):
            selftest.run_selftest(tol_overrides={"no-such-check": 1.0})
