import numpy as np
import pytest

from pdmpctl.coupling import (SelectionInfeasible, Shadow, check_nonexpansive_condition,
                              coupled_ensemble, coupling_gap, default_v_grid, select_w_hat,
                              simulate_coupled, write_pairs_csv)
from pdmpctl.model import ControlPoint, ModelError, phage_lambda_model, toy_model
from pdmpctl.policy import Constant, SteppedOpenLoop

PHAGE = phage_lambda_model()


def test_equal_states_keep_v():
    c = ControlPoint.of(0.3, 0.5)
    assert select_w_hat(PHAGE, 0, [2.0, 3.0], [2.0, 3.0], c).v == (0.5,)


def test_drift_v_matches_brute_force():
    m = toy_model("drift_v")
    W = default_v_grid(m)
    rng = np.random.default_rng(1)
    for _ in range(50):
        x, y = rng.random(2)
        v = rng.uniform(-1, 1)
        # w must satisfy (v - w)(x - y) <= 0; first such grid point in order
        ok = [w for w in W[:, 0] if (v - w) * (x - y) <= 1e-9]
        got = select_w_hat(m, 0, [x], [y], ControlPoint.of(0.0, v)).v[0]
        assert got == pytest.approx(ok[0])


def test_drift_v_prefers_v_on_grid():
    m = toy_model("drift_v")
    assert select_w_hat(m, 0, [0.8], [0.2], ControlPoint.of(0.0, 0.25)).v == (0.25,)


def test_infeasible_selection_raises():
    with pytest.raises(SelectionInfeasible):
        select_w_hat(toy_model("expansive"), 0, [0.8], [0.2], ControlPoint.of(0.0, 0.0))


def test_condition_check():
    assert check_nonexpansive_condition(toy_model("decay_1d"), 2000).passed
    bad = check_nonexpansive_condition(toy_model("expansive"), 2000)
    assert not bad.passed and bad.worst_flow_gap > 0
    assert "flow" in bad.witnesses


def test_condition_needs_restricted_model():
    from dataclasses import replace
    with pytest.raises(ModelError):
        check_nonexpansive_condition(replace(PHAGE, restricted=False), 10)


def test_phage_condition_holds():
    rep = check_nonexpansive_condition(PHAGE, 20_000, seed=3)
    assert rep.passed, (rep.worst_flow_gap, rep.worst_jump_gap, rep.worst_cost_gap)


def test_same_start_gives_zero_gap():
    pol = SteppedOpenLoop.random(PHAGE, 4, 6, seed=1)
    res = coupled_ensemble(PHAGE, 0, [4.0, 6.0], [4.0, 6.0], pol, 4, 50, seed=2, delta=1.0)
    mean, se = coupling_gap(res)
    assert mean == 0.0 and se == 0.0
    assert np.all(res.shadow["sup_gap"] == 0)


def test_shared_skeleton():
    pol = SteppedOpenLoop.random(PHAGE, 2, 6, seed=1)
    pair = simulate_coupled(PHAGE, 0, [8.0, 1.0], [1.0, 9.0], pol, 2, 10.0, seed=7, stream=3)
    assert pair.x.jump_times == pair.y.jump_times
    assert pair.x.post_jump_modes == pair.y.post_jump_modes
    assert len(pair.jump_times) > 0
    assert pair.selection_defect <= 1e-9


def test_distance_never_grows_for_decay():
    m = toy_model("decay_1d")
    res = coupled_ensemble(m, 0, [1.0], [0.2], Constant(0.0), 1, 3, seed=0, horizon=5.0)
    assert np.all(res.shadow["sup_gap"] <= 0.8 + 1e-12)


def test_pathwise_bound_on_phage():
    pol = SteppedOpenLoop.random(PHAGE, 8, 12, seed=4)
    res = coupled_ensemble(PHAGE, 0, [6.0, 2.0], [3.0, 7.0], pol, 8, 100, seed=1, delta=1.0)
    d0 = np.linalg.norm([3.0, -5.0])
    assert np.all(res.shadow["sup_gap"] <= d0 + 1e-9)
    assert np.all(np.isfinite(res.shadow["c_fit"]))


def test_step_mismatch_rejected():
    pol = SteppedOpenLoop.random(PHAGE, 4, 2, seed=0)
    with pytest.raises(ValueError):
        coupled_ensemble(PHAGE, 0, [1, 1], [2, 2], pol, 8, 2, seed=0, horizon=1.0)
    with pytest.raises(ModelError):
        from dataclasses import replace
        Shadow(replace(PHAGE, restricted=False), 4)


def test_pairs_csv(tmp_path):
    res = coupled_ensemble(PHAGE, 0, [6.0, 2.0], [3.0, 7.0], Constant(1.0, 1.0), 1, 4, seed=1,
                           delta=1.0)
    write_pairs_csv(tmp_path / "p.csv", [(1, res)])
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "n,pair,initial_distance,jump_count,sup_gap,cost_gap"
    assert len(lines) == 5
