import math

import numpy as np
import pytest

from pdmpctl.model import phage_lambda_model, toy_model
from pdmpctl.policy import Constant, FamilySpec
from pdmpctl.value import (abel_horizon, estimate_abel, estimate_cesaro, optimize_value,
                           tauberian_experiment)

PHAGE = phage_lambda_model()


def test_constant_cost_is_exact():
    m = toy_model("constant_cost", c=0.7)
    est = estimate_abel(m, Constant(0.0), 0, [0.5], 0.3, 10)
    assert est.mean == pytest.approx(0.7, abs=1e-12)
    est = estimate_cesaro(m, Constant(0.0), 0, [0.5], 4.0, 10)
    assert est.mean == pytest.approx(0.7, abs=1e-12)


@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_decay_abel_closed_form(delta):
    est = estimate_abel(toy_model("decay_1d"), Constant(0.0), 0, [1.0], delta, 2)
    assert est.mean == pytest.approx(delta / (delta + 1), abs=1e-6)
    assert est.truncation_bias_bound <= 1e-4 * (1 + 1e-9)


def test_decay_cesaro_closed_form():
    est = estimate_cesaro(toy_model("decay_1d"), Constant(0.0), 0, [1.0], 2.0, 2)
    assert est.mean == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-8)


def test_flipflop_abel_within_three_stderr():
    est = estimate_abel(toy_model("flipflop"), Constant(0.0), 0, [0.0], 1.0, 10_000, seed=4)
    assert abs(est.mean - 2 / 3) <= 3 * est.stderr


def test_flipflop_cesaro_long_run():
    est = estimate_cesaro(toy_model("flipflop"), Constant(0.0), 0, [0.0], 50.0, 2000, seed=2)
    expect = 0.5 + (1 - math.exp(-100)) / 200
    assert abs(est.mean - expect) <= 3 * est.stderr + 1e-6


def test_horizon_rule_and_limits():
    assert abel_horizon(PHAGE, 0.5, 1e-4) == pytest.approx(math.log(1e4) / 0.5)
    with pytest.raises(ValueError):
        estimate_abel(PHAGE, Constant(0.0), 0, [1, 1], 1e-4, 10, bias=1e-6)
    with pytest.raises(ValueError):
        estimate_abel(PHAGE, Constant(0.0), 0, [1, 1], 0.0, 10)


def test_optimizer_prefers_decay():
    fam = FamilySpec("constant", (0.0, 0.5, 1.0), (0.0,))
    pol, est, table = optimize_value(toy_model("controlled_decay"), fam, 0, [1.0],
                                     ("abel", 1.0), 4)
    assert pol.u.tolist() == [1.0]
    assert est.mean == pytest.approx(0.5, abs=1e-6)
    assert [e.mean for _, e in table] == sorted((e.mean for _, e in table), reverse=True)


def test_optimizer_tie_goes_to_first():
    fam = FamilySpec("constant", (0.0, 1.0), (0.0,))
    pol, _, _ = optimize_value(toy_model("constant_cost"), fam, 0, [0.0], ("abel", 1.0), 3)
    assert "u=[0.0]" in pol.label


def test_optimizer_on_phage_never_worse_than_member():
    fam = FamilySpec("constant", (0.0, 1.0), (0.0, 1.0))
    x0 = [2.0, 2.0]
    pol, best, table = optimize_value(PHAGE, fam, 0, x0, ("abel", 1.0), 300, seed=5)
    zero = estimate_abel(PHAGE, Constant(0.0, 0.0), 0, x0, 1.0, 300, seed=5)
    assert best.mean <= zero.mean + 1e-12
    assert min(e.mean for _, e in table) == best.mean


def test_tauberian_constant_cost_zero_gap():
    m = toy_model("constant_cost")
    rows, summary = tauberian_experiment(m, FamilySpec("constant", (0.0,), (0.0,)),
                                         [(0, [0.3])], [1.0, 0.5], 4)
    assert all(d == pytest.approx(0.0, abs=1e-10) for _, d, _ in summary)
    assert len(rows) == 2


def test_tauberian_decay_matches_closed_forms():
    m = toy_model("decay_1d")
    rows, summary = tauberian_experiment(m, FamilySpec("constant", (0.0,), (0.0,)),
                                         [(0, [1.0])], [2.0, 1.0, 0.5], 2)
    for (d, gap, _), row in zip(summary, rows):
        T = 1 / d
        expect = abs(d / (d + 1) - (1 - math.exp(-T)) / T)
        assert gap == pytest.approx(expect, abs=1e-5)
    with pytest.raises(ValueError):
        tauberian_experiment(m, FamilySpec(), [(0, [1.0])], [0.5, 1.0], 2)
