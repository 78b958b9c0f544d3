"""Synchronous coupling of two controlled paths on one jump skeleton.

When jump rates and mode kernels depend only on ``(mode, u)``, a second
state process ``Y`` started at ``y0`` can be driven by the same jump
times and post-jump modes as ``X``. ``Y`` reuses ``X``'s ``u`` and gets
its own second control ``w``, picked at each refresh instant to keep the
two paths from separating: ``<f(x,u,v) - f(y,u,w), x - y> <= 0``, post-jump
distance at most ``|x - y|``, and ``|h(x) - h(y)| <= Lip(h) |x - y|``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import ControlPoint, Model, ModelError
from .policy import Policy
from .simulate import EnsembleResult, SimOptions, Trajectory, simulate_ensemble
from .value import abel_horizon

__all__ = [
    "SelectionInfeasible",
    "NonexpReport",
    "CoupledPair",
    "Shadow",
    "default_v_grid",
    "defects",
    "select_w_hat",
    "check_nonexpansive_condition",
    "simulate_coupled",
    "coupled_ensemble",
    "coupling_gap",
    "write_pairs_csv",
]

_TIE = 1e-12


class SelectionInfeasible(RuntimeError):
    pass


def default_v_grid(model: Model, points: int = 33) -> np.ndarray:
    lo, hi = model.v_box
    axes = [np.array([a]) if a == b else np.linspace(a, b, points) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)


def _ball_radius(model: Model) -> float:
    lo, hi = model.invariant_box
    return float(np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))))


def defects(model: Model, gam, x, y, u, v, W: np.ndarray):
    """Defect components for every candidate ``w`` (rows of ``W``).

    Returns ``(flow, jump, cost)`` arrays of shape ``(n, K)``.
    """
    n, K = x.shape[0], W.shape[0]
    d = x - y
    dist = np.linalg.norm(d, axis=1)
    Q = model.kernel(gam, u)
    lip_h = model.bounds.lip_h
    # candidate-major rows: row i * K + k pairs sample i with candidate k
    G = np.repeat(gam, K)
    Y = np.repeat(y, K, axis=0)
    Uk = np.repeat(u, K, axis=0)
    Wk = np.tile(W, (n, 1))
    fx = np.repeat(model.flow(gam, x, u, v), K, axis=0)
    flow = np.sum((fx - model.flow(G, Y, Uk, Wk)) * np.repeat(d, K, axis=0), axis=1)
    hx = np.repeat(model.cost(gam, x, u, v), K)
    cost = np.abs(hx - model.cost(G, Y, Uk, Wk)) - lip_h * np.repeat(dist, K)
    jump = np.full((n, K), -np.inf)
    for th in range(Q.shape[1]):
        live = np.nonzero(Q[:, th] > 0)[0]
        if live.size == 0:
            continue
        m = live.size
        xs, ys, us, vs, gs = x[live], y[live], u[live], v[live], gam[live]
        xj = xs + model.jump(gs, np.full(m, th), xs, us, vs)
        Ys = np.repeat(ys, K, axis=0)
        Us = np.repeat(us, K, axis=0)
        yj = Ys + model.jump(np.repeat(gs, K), np.full(m * K, th), Ys, Us, np.tile(W, (m, 1)))
        diff = np.repeat(xj, K, axis=0) - yj
        ex = np.sqrt(np.einsum("ij,ij->i", diff, diff)).reshape(m, K) - dist[live, None]
        jump[live] = np.maximum(jump[live], ex)
    jump[np.isneginf(jump)] = 0.0
    return flow.reshape(n, K), jump, cost.reshape(n, K)


def _select(model: Model, gam, x, y, u, v, W):
    """Index into ``W`` of the chosen ``w`` per row, and the defect components."""
    fl, jp, co = defects(model, gam, x, y, u, v, W)
    total = np.maximum(np.maximum(fl, jp), co)
    best = total.min(axis=1)
    minimal = total <= best[:, None] + _TIE
    pick = np.argmax(minimal, axis=1)  # first minimizer in grid order
    # prefer w = v when it lies on the grid and is a minimizer
    on_grid = np.all(np.abs(W[None, :, :] - v[:, None, :]) <= _TIE, axis=2)
    same = on_grid & minimal
    has = same.any(axis=1)
    pick = np.where(has, np.argmax(same, axis=1), pick)
    r = np.arange(x.shape[0])
    return pick, total[r, pick], fl[r, pick], jp[r, pick], co[r, pick]


def select_w_hat(model: Model, mode, x, y, c: ControlPoint, v_grid=None,
                 tol: float = 1e-9) -> ControlPoint:
    """Control ``(u, w)`` for ``Y`` at one point.

    ``w`` is the grid point with the smallest worst defect; ``v`` itself
    wins ties when it is on the grid, otherwise the first minimizer in grid
    order. Raises :class:`SelectionInfeasible` if that defect exceeds ``tol``.
    """
    W = default_v_grid(model) if v_grid is None else np.atleast_2d(np.asarray(v_grid, float))
    gam = np.array([model.mode_index(mode)])
    x = np.asarray(x, float).reshape(1, -1)
    y = np.asarray(y, float).reshape(1, -1)
    u = np.asarray(c.u, float).reshape(1, -1)
    v = np.asarray(c.v, float).reshape(1, -1)
    pick, d, *_ = _select(model, gam, x, y, u, v, W)
    if d[0] > tol:
        raise SelectionInfeasible(f"no admissible w at x={x[0].tolist()}, y={y[0].tolist()}: "
                                  f"smallest defect {d[0]:.3g}")
    return ControlPoint(c.u, tuple(W[pick[0]].tolist()))


@dataclass(frozen=True)
class NonexpReport:
    samples: int
    worst_flow_gap: float
    worst_jump_gap: float
    worst_cost_gap: float
    witnesses: dict
    tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        return max(self.worst_flow_gap, self.worst_jump_gap, self.worst_cost_gap) <= self.tolerance


def _uniform_box(rng, box, n):
    lo, hi = box
    return lo + (hi - lo) * rng.random((n, lo.size))


def check_nonexpansive_condition(model: Model, n_samples: int = 10**5, v_grid=None,
                                 seed: int = 0, tol: float = 1e-9,
                                 batch: int = 10**4) -> NonexpReport:
    """Sampled worst case of the selection defect over ``(mode, x, y, u, v)``."""
    if not model.restricted:
        raise ModelError("the coupling condition needs rates and kernels free of x and v")
    if model.invariant_box is None:
        raise ModelError("the coupling condition needs an invariant box")
    W = default_v_grid(model) if v_grid is None else np.atleast_2d(np.asarray(v_grid, float))
    rng = np.random.default_rng(seed)
    worst = {"flow": -np.inf, "jump": -np.inf, "cost": -np.inf}
    wit: dict = {}
    done = 0
    while done < n_samples:
        m = min(batch, n_samples - done)
        gam = rng.integers(0, model.n_modes, m)
        x = _uniform_box(rng, model.invariant_box, m)
        y = _uniform_box(rng, model.invariant_box, m)
        u = _uniform_box(rng, model.u_box, m)
        v = _uniform_box(rng, model.v_box, m)
        pick, _, fl, jp, co = _select(model, gam, x, y, u, v, W)
        for name, arr in (("flow", fl), ("jump", jp), ("cost", co)):
            i = int(np.argmax(arr))
            if arr[i] > worst[name]:
                worst[name] = float(arr[i])
                wit[name] = {"mode": int(gam[i]), "x": x[i].tolist(), "y": y[i].tolist(),
                             "u": u[i].tolist(), "v": v[i].tolist(), "w": W[pick[i]].tolist()}
        done += m
    return NonexpReport(n_samples, worst["flow"], worst["jump"], worst["cost"], wit, tol)


class Shadow:
    """Selection rule handed to the simulation engine for the ``Y`` process."""

    def __init__(self, model: Model, n: int, v_grid=None, tol: float = 1e-9,
                 strict: bool = True):
        if not model.restricted:
            raise ModelError("coupling needs rates and kernels free of x and v")
        self.model = model
        self.n = int(n)
        self.W = default_v_grid(model) if v_grid is None else np.atleast_2d(
            np.asarray(v_grid, float))
        self.tol = tol
        self.strict = strict
        self.k0 = _ball_radius(model)

    def select(self, gam, x, y, u, v, t):
        pick, d, *_ = _select(self.model, gam, x, y, u, v, self.W)
        if self.strict and np.any(d > self.tol):
            i = int(np.argmax(d))
            raise SelectionInfeasible(
                f"no admissible w at t={float(t[i]):.10g}: x={x[i].tolist()}, "
                f"y={y[i].tolist()}, smallest defect {d[i]:.3g}")
        return self.W[pick].copy(), d


@dataclass
class CoupledPair:
    x: Trajectory
    y: Trajectory
    n: int
    gap: float | None
    sup_gap: float
    c_fit: float
    selection_defect: float

    @property
    def jump_times(self) -> list[float]:
        return self.x.jump_times

    @property
    def modes(self) -> list[int]:
        return self.x.post_jump_modes


def coupled_ensemble(model: Model, gamma0, x0, y0, policy: Policy, n: int, n_paths: int,
                     seed: int, *, delta: float | None = None, horizon: float | None = None,
                     v_grid=None, atoms: bool = False, options: SimOptions | None = None,
                     threads: int = 1, record: bool = False, bias: float = 1e-4,
                     first_stream: int = 0) -> EnsembleResult:
    """Coupled ``(X, Y)`` ensemble; ``horizon`` defaults to the Abel cap for ``delta``."""
    if horizon is None:
        if delta is None:
            raise ValueError("need a horizon or a discount")
        horizon = abel_horizon(model, delta, bias)
    shadow = Shadow(model, n, v_grid)
    return simulate_ensemble(model, gamma0, x0, policy, horizon, n_paths, seed, delta=delta,
                             options=options, shadow=shadow, y0=y0, atoms=atoms,
                             threads=threads, record=record, first_stream=first_stream)


def simulate_coupled(model: Model, gamma0, x0, y0, policy: Policy, n: int, horizon: float,
                     seed: int, *, stream: int = 0, delta: float | None = None, v_grid=None,
                     options: SimOptions | None = None) -> CoupledPair:
    res = coupled_ensemble(model, gamma0, x0, y0, policy, n, 1, seed, delta=delta,
                           horizon=horizon, v_grid=v_grid, options=options, record=True,
                           first_stream=stream)
    sh = res.shadow
    return CoupledPair(res.trajectories[0], res.extra["trajectories_y"][0], n,
                       float(sh["gap"][0]) if delta is not None else None,
                       float(sh["sup_gap"][0]), float(sh["c_fit"][0]),
                       float(sh["selection_defect"][0]))


def coupling_gap(res: EnsembleResult) -> tuple[float, float]:
    """Mean discounted cost gap ``E int delta e^{-delta t} |h(X) - h(Y)| dt`` and its stderr."""
    if res.shadow is None or res.delta is None:
        raise ValueError("need a discounted coupled ensemble")
    g = res.shadow["gap"]
    se = float(g.std(ddof=1) / math.sqrt(g.size)) if g.size > 1 else 0.0
    return float(g.mean()), se


def write_pairs_csv(path, blocks) -> None:
    """``blocks``: iterable of ``(n, EnsembleResult)``; one row per pair."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "pair", "initial_distance", "jump_count", "sup_gap", "cost_gap"])
        for n, res in blocks:
            d0 = np.linalg.norm(res.extra["x0"] - res.extra["y0"], axis=1)
            for i in range(res.n_paths):
                w.writerow([n, i, repr(float(d0[i])), int(res.n_jumps[i]),
                            repr(float(res.shadow["sup_gap"][i])),
                            repr(float(res.shadow["gap"][i]))])
