import math

import numpy as np
import pytest

from pdmpctl.coupling import coupled_ensemble
from pdmpctl.model import phage_lambda_model, toy_model
from pdmpctl.occupation import (TestFunction, battery, cost_integral, empirical_occupation,
                                generator_residual, mixture, write_atoms_csv)
from pdmpctl.policy import Constant, SteppedOpenLoop
from pdmpctl.simulate import simulate_ensemble

PHAGE = phage_lambda_model()
ONE = TestFunction("1", lambda g, x: np.ones(x.shape[0]), lambda g, x: np.zeros_like(x))
X = TestFunction("x", lambda g, x: x[:, 0].copy(), lambda g, x: np.ones_like(x))


def occ(model, x0, policy=Constant(0.0), delta=1.0, n=20, H=None, seed=0, **kw):
    H = H or math.log(1e4) / delta
    res = simulate_ensemble(model, 0, x0, policy, H, n, seed, delta=delta, atoms=True, **kw)
    return res, empirical_occupation(res)


def test_constant_cost_point_mass():
    res, mu = occ(toy_model("constant_cost"), [0.4])
    assert np.all(mu.atoms["x"] == 0.4)
    assert mu.total_weight + mu.tail_mass == pytest.approx(1.0, abs=1e-10)
    assert cost_integral(mu, toy_model("constant_cost")) == pytest.approx(0.7, abs=1e-10)


def test_cost_integral_equals_abel():
    pol = SteppedOpenLoop.random(PHAGE, 4, 6, seed=2)
    res, mu = occ(PHAGE, [5.0, 5.0], pol, delta=0.5, n=30, seed=3)
    assert res.extra["strata"] is None
    assert cost_integral(mu, PHAGE) == pytest.approx(res.abel.mean(), abs=1e-12)


def test_flipflop_mode_masses():
    res, mu = occ(toy_model("flipflop"), [0.0], n=4000, seed=1, max_atoms=10**7)
    mass_a = float(mu.atoms["weight"][mu.atoms["mode"] == 0].sum()
                   + mu.terminal["weight"][mu.terminal["mode"] == 0].sum())
    assert abs(mass_a - 2 / 3) < 0.02


def test_constant_function_residual_vanishes():
    _, mu = occ(PHAGE, [5.0, 5.0], Constant(1.0, 1.0), n=50)
    r, se = generator_residual(PHAGE, mu, ONE)
    assert abs(r) < 1e-10


def test_decay_residual_vanishes():
    _, mu = occ(toy_model("decay_1d"), [1.0], n=2)
    r, _ = generator_residual(toy_model("decay_1d"), mu, X)
    assert abs(r) < 1e-6


def test_residual_is_linear_in_phi():
    _, mu = occ(PHAGE, [5.0, 5.0], SteppedOpenLoop.random(PHAGE, 2, 4, seed=0), n=40)
    fns = battery(PHAGE)
    a, b = fns[4], fns[13]
    combo = TestFunction("c", lambda g, x: 2 * a.phi(g, x) - 3 * b.phi(g, x),
                         lambda g, x: 2 * a.grad(g, x) - 3 * b.grad(g, x))
    ra, _ = generator_residual(PHAGE, mu, a)
    rb, _ = generator_residual(PHAGE, mu, b)
    rc, _ = generator_residual(PHAGE, mu, combo)
    assert rc == pytest.approx(2 * ra - 3 * rb, abs=1e-12)


def test_battery_shape():
    fns = battery(PHAGE)
    assert len(fns) == 30
    assert fns[0].id == "D_free:1" and fns[4].id == "D_free:x1*x2"


def test_mixture_keeps_groups():
    _, a = occ(PHAGE, [5.0, 5.0], Constant(0.0, 0.0), n=30, seed=1)
    _, b = occ(PHAGE, [5.0, 5.0], Constant(1.0, 1.0), n=30, seed=2)
    mx = mixture(a, b, 0.25)
    assert len(mx.n_paths) == 2
    assert mx.total_weight + mx.tail_mass == pytest.approx(1.0, abs=1e-10)
    for f in battery(PHAGE)[:8]:
        ra, _ = generator_residual(PHAGE, a, f)
        rb, _ = generator_residual(PHAGE, b, f)
        rm, _ = generator_residual(PHAGE, mx, f)
        assert rm == pytest.approx(0.25 * ra + 0.75 * rb, abs=1e-12)


def test_coupled_occupation():
    pol = SteppedOpenLoop.random(PHAGE, 2, 4, seed=3)
    res = coupled_ensemble(PHAGE, 0, [6.0, 2.0], [3.0, 7.0], pol, 2, 30, seed=1, delta=1.0,
                           atoms=True)
    mu = empirical_occupation(res, "y")
    assert mu.origin[1].tolist() == [3.0, 7.0]
    r, _ = generator_residual(PHAGE, mu, ONE)
    assert abs(r) < 1e-10
    with pytest.raises(ValueError):
        empirical_occupation(res, "z")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_unbounded_phi_rejected():
    _, mu = occ(toy_model("decay_1d"), [1.0], n=2)
    bad = TestFunction("inv", lambda g, x: 1 / x[:, 0], lambda g, x: -1 / x ** 2)
    with pytest.raises(ValueError):
        generator_residual(toy_model("decay_1d"), mu, bad)


def test_atoms_csv(tmp_path):
    _, mu = occ(toy_model("decay_1d"), [1.0], n=1, H=1.0)
    write_atoms_csv(tmp_path / "a.csv", mu)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "mode,y1,u1,v1,weight"
    assert len(lines) == 1 + mu.size
