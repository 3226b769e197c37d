"""Finite-difference gradient checks for every differentiable piece."""

from __future__ import annotations

import pytest

from agents.diagnostics import GRADCHECKS, run_gradchecks, tiny_scene
from core.geometry import points_in_box


class TestGradchecks:
    @pytest.mark.parametrize("name", sorted(GRADCHECKS))
    def test_analytic_matches_numeric(self, name):
        table = run_gradchecks([name])
        assert len(table) > 0
        failing = table[~table["passed"]]
        assert failing.empty, failing.to_string()

    def test_unknown_check(self):
        with pytest.raises(KeyError):
            run_gradchecks(["not_a_layer"])

    def test_table_columns(self):
        table = run_gradchecks(["linear"])
        assert list(table.columns) == ["check", "input", "max_rel_error", "passed"]
        assert set(table["input"]) == {"x", "weight", "bias"}


class TestTinyScene:
    def test_layout(self):
        positions, gt = tiny_scene()
        assert positions.shape == (28, 3)
        assert [item.class_id for item in gt] == [1, 2]
        assert points_in_box(positions[:12], gt[0].box).all()
        assert points_in_box(positions[12:24], gt[1].box).all()
