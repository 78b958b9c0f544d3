import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdmpctl.model import (BOTH, D_FREE, OR2_ACTIVE, OR2_SPENT, OR3, ControlPoint, ModelError,
                           PhageParams, control_grid, flow_field, jump_map, jump_rate,
                           mode_distribution, phage_lambda_model, running_cost, toy_model,
                           validate_model)

PHAGE = phage_lambda_model()
ON = ControlPoint.of(1.0, 1.0)


def test_phage_flow_small_alpha():
    m = phage_lambda_model(PhageParams(alpha=2.0))
    np.testing.assert_allclose(flow_field(m, D_FREE, [1.0, 1.0], ON), [0.0, -0.5])


def test_phage_flow_vanishes_without_control():
    assert np.all(flow_field(PHAGE, OR3, [3.0, 7.0], ControlPoint.of(0.0, 1.0)) == 0)
    assert np.all(flow_field(PHAGE, OR3, [3.0, 7.0], ControlPoint.of(1.0, 0.0)) == 0)


def test_phage_rates():
    c = ControlPoint.of(0.0, 0.0)
    assert jump_rate(PHAGE, D_FREE, [1, 1], c) == pytest.approx(2 * 0.2)
    assert jump_rate(PHAGE, OR2_ACTIVE, [1, 1], ON) == pytest.approx(2.5 * 1.2)
    assert jump_rate(PHAGE, OR2_SPENT, [1, 1], ON) == pytest.approx(1.5 * 1.2)
    assert jump_rate(PHAGE, OR3, [1, 1], ON) == pytest.approx(0.5 * 1.2)
    assert jump_rate(PHAGE, BOTH, [1, 1], ON) == pytest.approx(0.5 * 1.2)
    assert PHAGE.bounds.lambda_max == pytest.approx(3.0)


def test_phage_kernel_rows():
    np.testing.assert_allclose(mode_distribution(PHAGE, D_FREE, ON), [0, .5, 0, .5, 0])
    np.testing.assert_allclose(mode_distribution(PHAGE, OR2_ACTIVE, ON), [.2, 0, .4, 0, .4])
    np.testing.assert_allclose(mode_distribution(PHAGE, OR2_SPENT, ON), [1 / 3, 0, 0, 0, 2 / 3])
    np.testing.assert_allclose(mode_distribution(PHAGE, OR3, ON), [1, 0, 0, 0, 0])
    np.testing.assert_allclose(mode_distribution(PHAGE, BOTH, ON), [0, 1, 0, 0, 0])


def test_phage_jump_translations():
    np.testing.assert_allclose(jump_map(PHAGE, D_FREE, OR3, [2.0, 0.4], ON), [2.0, 0.0])
    np.testing.assert_allclose(jump_map(PHAGE, OR2_ACTIVE, D_FREE, [2.0, 9.5], ON), [2.0, 10.0])
    np.testing.assert_allclose(jump_map(PHAGE, OR2_ACTIVE, BOTH, [2.0, 3.0], ON), [2.0, 2.0])
    np.testing.assert_allclose(jump_map(PHAGE, OR2_ACTIVE, OR2_SPENT, [7.0, 3.0], ON),
                               [10.0, 3.0])
    np.testing.assert_allclose(jump_map(PHAGE, OR2_ACTIVE, OR2_SPENT, [1.0, 3.0], ON),
                               [6.0, 3.0])
    np.testing.assert_allclose(jump_map(PHAGE, BOTH, OR2_ACTIVE, [1.0, 3.0], ON), [1.0, 4.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4),
       st.tuples(st.floats(0, 10), st.floats(0, 10)), st.tuples(st.floats(0, 10), st.floats(0, 10)))
def test_phage_jump_maps_stay_in_box_and_are_nonexpansive(g, th, x, y):
    a = jump_map(PHAGE, g, th, x, ON)
    b = jump_map(PHAGE, g, th, y, ON)
    assert np.all(a >= 0) and np.all(a <= 10)
    assert np.linalg.norm(a - b) <= np.linalg.norm(np.subtract(x, y)) + 1e-12


def test_cost_default_and_dimer():
    assert running_cost(PHAGE, 0, [4.0, 2.0], ON) == pytest.approx(0.4)
    assert running_cost(phage_lambda_model(cost="x2"), 0, [4.0, 2.0], ON) == pytest.approx(0.2)


def test_invalid_params():
    with pytest.raises(ModelError):
        PhageParams(alpha=0.0)
    with pytest.raises(ModelError):
        PhageParams(n_burst=0.5)
    with pytest.raises(ModelError):
        toy_model("nope")
    with pytest.raises(ModelError):
        PHAGE.mode_index(7)
    assert PHAGE.mode_index("OR3") == OR3


def test_control_grid_shapes():
    U, V = control_grid(PHAGE, 5)
    assert U.shape == (25, 1) and V.shape == (25, 1)
    U, V = control_grid(toy_model("decay_1d"), 5)
    assert U.shape == (1, 1)


@pytest.mark.parametrize("name", ["constant_cost", "decay_1d", "flipflop", "controlled_decay"])
def test_toys_validate(name):
    assert validate_model(toy_model(name), 2000).ok


def test_phage_validates():
    rep = validate_model(PHAGE, 10_000)
    assert rep.ok, rep.violations
    assert rep.empirical["lip_jump_map"] <= 1 + 1e-12
    assert rep.empirical["f_max"] <= math.sqrt(10) * 10


def test_validation_flags_wrong_declaration():
    m = toy_model("decay_1d")
    from dataclasses import replace
    bad = replace(m, bounds=replace(m.bounds, lip_f=0.5))
    rep = validate_model(bad, 500)
    assert not rep.ok and rep.violations["lip_f"] > 0
