"""Empirical discounted occupation measures and the generator constraint.

An ensemble run with ``atoms=True`` leaves weighted atoms ``(mode, state,
u, v)`` at the Simpson nodes of each integrator step, weighted by
``delta e^{-delta t} q / n_paths``. Integrating ``L phi + delta (phi(origin) - phi)``
against them should vanish for every smooth ``phi``. Because the run stops
at a finite horizon ``H``, the atom integral equals
``delta e^{-delta H} (E phi(Z_H) - phi(origin))`` instead of 0. The terminal
states are kept so that this term can be subtracted exactly.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import Model
from .simulate import EnsembleResult

__all__ = [
    "EmpiricalOccupation",
    "TestFunction",
    "empirical_occupation",
    "generator_residual",
    "cost_integral",
    "mixture",
    "battery",
    "write_atoms_csv",
    "write_residuals_csv",
]


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    id: str
    phi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class EmpiricalOccupation:
    delta: float
    origin: tuple[int, np.ndarray]
    atoms: dict  # path, mode, x, u, v, weight
    terminal: dict  # path, mode, x, u, v, weight
    n_paths: dict  # group -> number of paths

    @property
    def total_weight(self) -> float:
        return float(self.atoms["weight"].sum())

    @property
    def tail_mass(self) -> float:
        return float(self.terminal["weight"].sum())

    @property
    def size(self) -> int:
        return int(self.atoms["weight"].size)


def _check_origin(res: EnsembleResult, key: str):
    g0 = res.extra["gamma0"]
    x0 = res.extra[key]
    if np.any(g0 != g0[0]) or np.any(np.abs(x0 - x0[0]) > 0):
        raise ValueError("ensemble paths do not share one origin")
    return int(g0[0]), x0[0].copy()


def empirical_occupation(res: EnsembleResult, which: str = "x") -> EmpiricalOccupation:
    """Occupation measure of ``X`` (or of the coupled ``Y`` with ``which="y"``)."""
    if res.delta is None:
        raise ValueError("ensemble was not discounted")
    if which == "x":
        atoms = res.atoms
        origin = _check_origin(res, "x0")
        term_x = res.terminal_state
        term_v = res.extra["terminal_v"]
    elif which == "y":
        if res.shadow is None:
            raise ValueError("ensemble has no coupled process")
        atoms = res.shadow.get("atoms")
        origin = _check_origin(res, "y0")
        term_x = res.shadow["y_terminal_state"]
        term_v = res.shadow["y_terminal_w"]
    else:
        raise ValueError("which must be 'x' or 'y'")
    if atoms is None:
        raise ValueError("ensemble was run without atoms=True")
    n = res.n_paths
    atoms = dict(atoms)
    atoms["group"] = np.zeros(atoms["path"].size, dtype=np.int64)
    wT = math.exp(-res.delta * res.horizon) / n
    terminal = {"path": np.arange(n), "group": np.zeros(n, dtype=np.int64),
                "mode": res.terminal_mode.copy(), "x": term_x.copy(),
                "u": res.extra["terminal_u"].copy(), "v": term_v.copy(), "weight": np.full(n, wT)}
    return EmpiricalOccupation(res.delta, origin, atoms, terminal, {0: n})


def mixture(a: EmpiricalOccupation, b: EmpiricalOccupation, p: float = 0.5) -> EmpiricalOccupation:
    """``p a + (1 - p) b``; paths of the two parts stay separate groups."""
    if a.delta != b.delta:
        raise ValueError("mixture parts have different discounts")
    if a.origin[0] != b.origin[0] or not np.array_equal(a.origin[1], b.origin[1]):
        raise ValueError("mixture parts have different origins")
    shift = max(a.n_paths) + 1

    def merge(da, db):
        out = {}
        for k in da:
            if k == "weight":
                out[k] = np.concatenate([p * da[k], (1 - p) * db[k]])
            elif k == "group":
                out[k] = np.concatenate([da[k], db[k] + shift])
            else:
                out[k] = np.concatenate([da[k], db[k]])
        return out

    groups = dict(a.n_paths)
    groups.update({g + shift: m for g, m in b.n_paths.items()})
    return EmpiricalOccupation(a.delta, a.origin, merge(a.atoms, b.atoms),
                               merge(a.terminal, b.terminal), groups)


def _validate(model: Model, f: TestFunction, samples: int = 256) -> None:
    if model.invariant_box is None:
        return
    rng = np.random.default_rng(0)
    lo, hi = model.invariant_box
    corners = np.array(list(itertools.product(*zip(lo, hi))), dtype=float)
    x = np.concatenate([corners, lo + (hi - lo) * rng.random((samples, model.dim))])
    gam = np.concatenate([np.repeat(np.arange(model.n_modes), corners.shape[0]),
                          rng.integers(0, model.n_modes, samples)])
    x = np.concatenate([np.tile(corners, (model.n_modes - 1, 1)), x])
    vals = np.concatenate([np.abs(f.phi(gam, x)), np.abs(f.grad(gam, x)).ravel()])
    if not np.all(np.isfinite(vals)) or vals.max() > 1e12:
        raise ValueError(f"test function {f.id} is not bounded on K")


def generator_terms(model: Model, occ: EmpiricalOccupation, f: TestFunction) -> np.ndarray:
    """Per-atom ``L phi + delta (phi(origin) - phi)``."""
    a = occ.atoms
    gam, x, u, v = a["mode"], a["x"], a["u"], a["v"]
    phi = f.phi(gam, x)
    out = np.sum(model.flow(gam, x, u, v) * f.grad(gam, x), axis=1)
    lam = model.rate(gam, x, u)
    Q = model.kernel(gam, u)
    jump = np.zeros(gam.size)
    for th in range(Q.shape[1]):
        live = np.nonzero(Q[:, th] > 0)[0]
        if live.size == 0:
            continue
        ths = np.full(live.size, th)
        tgt = x[live] + model.jump(gam[live], ths, x[live], u[live], v[live])
        jump[live] += Q[live, th] * (f.phi(ths, tgt) - phi[live])
    g0, x0 = occ.origin
    phi0 = f.phi(np.array([g0]), x0[None, :])[0]
    return out + lam * jump + occ.delta * (phi0 - phi)


def generator_residual(model: Model, occ: EmpiricalOccupation, f: TestFunction,
                       validate: bool = True) -> tuple[float, float]:
    """Generator constraint integrated against ``occ`` plus jackknife stderr over paths."""
    if validate:
        _validate(model, f)
    a, T = occ.atoms, occ.terminal
    contrib = a["weight"] * generator_terms(model, occ, f)
    g0, x0 = occ.origin
    phi0 = f.phi(np.array([g0]), x0[None, :])[0]
    tcontrib = -occ.delta * T["weight"] * (f.phi(T["mode"], T["x"]) - phi0)
    total = float(contrib.sum() + tcontrib.sum())
    var = 0.0
    for g, n in occ.n_paths.items():
        per = np.bincount(a["path"][a["group"] == g], weights=contrib[a["group"] == g],
                          minlength=n)
        per = per + np.bincount(T["path"][T["group"] == g], weights=tcontrib[T["group"] == g],
                                minlength=n)
        if n > 1:
            var += n / (n - 1) * float(np.sum((per - per.mean()) ** 2))
    return total, math.sqrt(var)


def cost_integral(occ: EmpiricalOccupation, model: Model) -> float:
    """``int h d mu``, with the tail mass charged at the terminal states."""
    total = 0.0
    for a in (occ.atoms, occ.terminal):
        total += float(np.sum(a["weight"] * model.cost(a["mode"], a["x"], a["u"], a["v"])))
    return total


def _monomials(dim: int):
    out = [()]
    out += [(i,) for i in range(dim)]
    out += [c for c in itertools.combinations_with_replacement(range(dim), 2)]
    return out


def battery(model: Model) -> list[TestFunction]:
    """Mode indicators times monomials of degree at most 2 in ``x / scale``.

    For two state coordinates this is ``{1, x1, x2, x1^2, x1 x2, x2^2}`` per
    mode.
    """
    scale = np.ones(model.dim)
    if model.invariant_box is not None:
        hi = np.maximum(np.abs(model.invariant_box[0]), np.abs(model.invariant_box[1]))
        scale = np.where(hi > 0, hi, 1.0)
    fns = []
    for m in range(model.n_modes):
        for mono in _monomials(model.dim):
            fns.append(_poly_fn(m, mono, scale, model.modes[m].label))
    return fns


def _poly_fn(m: int, mono: tuple, scale: np.ndarray, label: str) -> TestFunction:
    name = "*".join(f"x{i + 1}" for i in mono) or "1"

    def phi(gam, x):
        z = x / scale
        val = np.ones(x.shape[0])
        for i in mono:
            val = val * z[:, i]
        return np.where(gam == m, val, 0.0)

    def grad(gam, x):
        z = x / scale
        out = np.zeros_like(x)
        for k, i in enumerate(mono):
            rest = np.ones(x.shape[0])
            for j, i2 in enumerate(mono):
                if j != k:
                    rest = rest * z[:, i2]
            out[:, i] += rest / scale[i]
        return np.where((gam == m)[:, None], out, 0.0)

    return TestFunction(f"{label}:{name}", phi, grad)


def write_atoms_csv(path, occ: EmpiricalOccupation) -> None:
    a = occ.atoms
    N, du, dv = a["x"].shape[1], a["u"].shape[1], a["v"].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", *[f"y{i + 1}" for i in range(N)], *[f"u{i + 1}" for i in range(du)],
                    *[f"v{i + 1}" for i in range(dv)], "weight"])
        for k in range(a["weight"].size):
            w.writerow([int(a["mode"][k]), *map(repr, a["x"][k].tolist()),
                        *map(repr, a["u"][k].tolist()), *map(repr, a["v"][k].tolist()),
                        repr(float(a["weight"][k]))])


def write_residuals_csv(path, rows) -> None:
    """``rows``: ``(measure, phi_id, residual, stderr)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["measure", "phi_id", "residual", "stderr"])
        for meas, fid, r, se in rows:
            w.writerow([meas, fid, repr(float(r)), repr(float(se))])
