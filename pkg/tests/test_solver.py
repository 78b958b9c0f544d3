import json

import numpy as np
import pytest

from pdmpctl.model import phage_lambda_model, toy_model
from pdmpctl.policy import policy_from_json
from pdmpctl.solver import (NonContractionError, Solver, bellman_step, contraction_bound,
                            hjb_residual, solve_discounted, step_convergence_study)

PHAGE = phage_lambda_model()


@pytest.fixture(scope="module")
def phage_solver():
    return Solver(PHAGE, 0.5, 2, counts=9)


def test_constant_cost_fixed_point():
    m = toy_model("constant_cost", c=0.7)
    table, _ = solve_discounted(m, 0.5, 1, counts=5)
    np.testing.assert_allclose(table.values, 0.7, atol=1e-7)
    again = bellman_step(m, table)
    np.testing.assert_allclose(again.values, table.values, atol=1e-9)
    assert np.nanmax(np.abs(hjb_residual(m, table))) <= 1e-9


def test_decay_linear_value():
    table, _ = solve_discounted(toy_model("decay_1d"), 1.0, 1, counts=65)
    x = table.nodes()[:, 0]
    np.testing.assert_allclose(table.values[0], x / 2, atol=1e-6)
    assert np.nanmax(np.abs(hjb_residual(toy_model("decay_1d"), table))) <= 1e-2


def test_flipflop_two_modes():
    table, hist = solve_discounted(toy_model("flipflop"), 1.0, 1, counts=3)
    np.testing.assert_allclose(table.values[0], 2 / 3, atol=1e-6)
    np.testing.assert_allclose(table.values[1], 1 / 3, atol=1e-6)
    ratios = [h["ratio"] for h in hist[1:]]
    assert max(ratios) <= contraction_bound(toy_model("flipflop"), 1.0) + 1e-6


def test_monotone_and_contractive(phage_solver):
    rng = np.random.default_rng(0)
    alpha = contraction_bound(PHAGE, 0.5)
    assert alpha == pytest.approx(3 / 3.5)
    for _ in range(5):
        a = rng.random((5, 81))
        b = a + rng.random((5, 81)) * 0.3
        ta, _ = phage_solver.step(a)
        tb, _ = phage_solver.step(b)
        assert np.all(ta <= tb + 1e-9)
        assert np.max(np.abs(ta - tb)) <= alpha * np.max(np.abs(a - b)) + 1e-9


def test_phage_ratios_and_range():
    table, hist = solve_discounted(PHAGE, 0.5, 2, counts=9)
    alpha = contraction_bound(PHAGE, 0.5)
    assert all(h["ratio"] <= alpha + 1e-6 for h in hist[1:])
    assert hist[-1]["sup_change"] <= 1e-7
    assert np.all(table.values >= -1e-9) and np.all(table.values <= 1 + 1e-9)


def test_rate_free_model_is_step_independent():
    rows, _ = step_convergence_study(toy_model("controlled_decay"), 1.0, [1, 2, 4], counts=17)
    assert all(d <= 1e-9 for _, d in rows)
    with pytest.raises(ValueError):
        step_convergence_study(toy_model("decay_1d"), 1.0, [4, 2])


def test_non_contraction_detected(monkeypatch):
    m = toy_model("flipflop")
    import pdmpctl.solver as solver_mod
    monkeypatch.setattr(solver_mod, "contraction_bound", lambda model, delta: 0.1)
    with pytest.raises(NonContractionError):
        solve_discounted(m, 0.01, 1, counts=3, tol=1e-12)


def test_table_serialization_and_greedy(tmp_path):
    table, _ = solve_discounted(PHAGE, 0.5, 2, counts=5)
    table.write(tmp_path / "v.csv", tmp_path / "v.json")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "mode,i1,i2,x1,x2,value"
    assert len(lines) == 1 + 5 * 25
    head = json.loads((tmp_path / "v.json").read_text())
    assert head["delta"] == 0.5 and head["n"] == 2
    pol = table.greedy_policy()
    assert pol.n == 2
    assert policy_from_json(pol.to_json()).to_json() == pol.to_json()
    assert table.value(0, [0.0, 0.0]) == pytest.approx(table.values[0, 0])
