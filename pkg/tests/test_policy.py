import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdmpctl.model import phage_lambda_model
from pdmpctl.policy import (Constant, FamilySpec, FamilyTooLarge, FeedbackGrid, StateGrid,
                            SteppedOpenLoop, cell_index, enumerate_policy_family,
                            evaluate_policy, policy_from_json)

PHAGE = phage_lambda_model()


def test_cell_boundaries_are_right_closed():
    assert cell_index(0.0, 2) == 0
    assert cell_index(0.5, 2) == 0
    assert cell_index(0.500001, 2) == 1
    assert cell_index(1.0, 2) == 1


def test_stepped_boundary_example():
    p = SteppedOpenLoop.shared(PHAGE, 2, [(0.2, 0.0), (0.8, 1.0)])
    assert evaluate_policy(p, 0, [1, 1], 0.5).u == (0.2,)
    assert evaluate_policy(p, 0, [1, 1], 0.500001).u == (0.8,)
    # past the table the last step holds
    assert evaluate_policy(p, 0, [1, 1], 7.0).v == (1.0,)


def test_constant_ignores_everything():
    p = Constant(0.3, 0.6)
    a = evaluate_policy(p, 0, [1, 2], 0.0)
    b = evaluate_policy(p, 4, [9, 0], 3.3, jump_index=12)
    assert a == b and a.u == (0.3,) and a.v == (0.6,)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        evaluate_policy(Constant(0.0), 0, [0, 0], -1e-9)


def test_single_cell_feedback_equals_constant():
    grid = StateGrid.single(2)
    fb = FeedbackGrid(np.tile([0.4, 1.0], (5, 1, 1)), 1, grid)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.random(2) * 10
        assert evaluate_policy(fb, int(rng.integers(5)), x, rng.random()) == \
            evaluate_policy(Constant(0.4, 1.0), 0, x, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 5), st.integers(0, 4), st.integers(0, 20), st.integers(1, 3))
def test_refinement_is_same_policy(t, mode, k, factor):
    p = SteppedOpenLoop.random(PHAGE, 3, 5, seed=1)
    q = p.refine(factor)
    x = [3.0, 7.0]
    assert evaluate_policy(p, mode, x, t, k) == evaluate_policy(q, mode, x, t, k)


def test_json_roundtrip():
    for p in (Constant(0.5, 1.0), SteppedOpenLoop.random(PHAGE, 4, 3, seed=2),
              FeedbackGrid(np.random.default_rng(0).random((5, 16, 2)), 1,
                           StateGrid.over(PHAGE, 4), n=4)):
        q = policy_from_json(p.to_json())
        assert q.to_json() == p.to_json()
        assert evaluate_policy(q, 2, [4.0, 1.0], 0.3, 1) == evaluate_policy(p, 2, [4.0, 1.0], 0.3, 1)


def test_family_sizes():
    assert FamilySpec("constant", (0, .5, 1), (0, 1)).size(PHAGE) == 6
    assert FamilySpec("stepped", (0, 1), (0,), n=2, n_steps=2).size(PHAGE) == 4
    fam = list(enumerate_policy_family(FamilySpec("constant", (0, .5, 1), (0, 1)), PHAGE))
    assert len(fam) == 6 and len({p.to_json() for p in fam}) == 6


def test_family_cap():
    spec = FamilySpec("stepped", (0, .5, 1), (0, 1), n=4, n_steps=10, cap=1000)
    with pytest.raises(FamilyTooLarge):
        next(enumerate_policy_family(spec, PHAGE))
