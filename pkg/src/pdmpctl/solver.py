"""Grid solver for the discounted value over policies stepped at ``1/n``.

The value ``w`` on a node grid of the invariant box is built by the
recursion on the number of jumps: given the previous level ``w_prev``,
the next level solves, mode by mode, the deterministic problem

    W(x) = min_c  int_0^D S(t) e^{-delta t} [delta h + lambda sum_theta Q w_prev(theta, Phi_t + g)] dt
                  + S(D) e^{-delta D} W(Phi_D)

with ``D = 1/n``. The inner problem is solved exactly by policy iteration
(sparse linear solves), so one outer step contracts by at most
``lambda_max / (delta + lambda_max)``, uniformly in ``n``. The fixed point
is the same as that of the one-step operator in which ``W`` and
``w_prev`` coincide.

Flows and hazards are integrated by RK4 substeps; time integrals use
composite Simpson on the substep grid with Hermite midpoints; values off
the grid come from multilinear interpolation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .model import Model, control_grid
from .policy import FeedbackGrid, StateGrid

__all__ = [
    "ValueTable",
    "SolverError",
    "NonContractionError",
    "Solver",
    "bellman_step",
    "solve_discounted",
    "step_convergence_study",
    "hjb_residual",
    "interp_weights",
    "contraction_bound",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class NonContractionError(SolverError):
    pass


def contraction_bound(model: Model, delta: float) -> float:
    lam = model.bounds.lambda_max
    return lam / (delta + lam)


def interp_weights(grid: StateGrid, pts: np.ndarray):
    """Multilinear interpolation corners and weights on a node grid."""
    pts = np.atleast_2d(pts)
    m = pts.shape[0]
    idx = np.zeros((m, 1), dtype=np.int64)
    wt = np.ones((m, 1))
    for d, c in enumerate(grid.counts):
        if c == 1:
            continue
        step = (grid.hi[d] - grid.lo[d]) / (c - 1)
        r = np.clip((pts[:, d] - grid.lo[d]) / step, 0.0, c - 1)
        i0 = np.minimum(np.floor(r), c - 2).astype(np.int64)
        fr = (r - i0)[:, None]
        i0 = i0[:, None]
        idx = np.concatenate([idx * c + i0, idx * c + i0 + 1], axis=1)
        wt = np.concatenate([wt * (1.0 - fr), wt * fr], axis=1)
    return idx, wt


def grid_nodes(grid: StateGrid) -> np.ndarray:
    axes = [np.linspace(lo, hi, c) if c > 1 else np.array([lo])
            for lo, hi, c in zip(grid.lo, grid.hi, grid.counts)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


@dataclass
class ValueTable:
    grid: StateGrid
    values: np.ndarray  # (modes, grid.size)
    delta: float
    n: int
    controls: tuple[np.ndarray, np.ndarray]
    argmin: np.ndarray | None = None  # (modes, grid.size) index into controls
    meta: dict = field(default_factory=dict)

    def nodes(self) -> np.ndarray:
        return grid_nodes(self.grid)

    def __call__(self, gam, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        gam = np.broadcast_to(np.atleast_1d(np.asarray(gam)), (x.shape[0],))
        idx, wt = interp_weights(self.grid, x)
        return np.sum(self.values[gam[:, None], idx] * wt, axis=1)

    def value(self, gam: int, x) -> float:
        return float(self(gam, x)[0])

    def greedy_policy(self, label: str = "") -> FeedbackGrid:
        if self.argmin is None:
            raise SolverError("table carries no minimizing controls")
        U, V = self.controls
        table = np.concatenate([U[self.argmin], V[self.argmin]], axis=-1)
        return FeedbackGrid(table, U.shape[1], self.grid, n=self.n,
                            label=label or f"greedy(delta={self.delta:g},n={self.n})")

    def neighbor_slope(self) -> float:
        """Largest ``|v(node) - v(neighbor)| / spacing`` over grid edges."""
        shape = (self.values.shape[0], *self.grid.counts)
        v = self.values.reshape(shape)
        worst = 0.0
        for d, c in enumerate(self.grid.counts):
            if c < 2:
                continue
            step = (self.grid.hi[d] - self.grid.lo[d]) / (c - 1)
            worst = max(worst, float(np.max(np.abs(np.diff(v, axis=d + 1))) / step))
        return worst

    def header(self) -> dict:
        U, V = self.controls
        return {"delta": self.delta, "n": self.n, "grid": self.grid.to_dict(),
                "u_grid": U.tolist(), "v_grid": V.tolist(), **self.meta}

    def write(self, csv_path, json_path=None) -> None:
        nodes = self.nodes()
        sub = np.stack(np.unravel_index(np.arange(self.grid.size), self.grid.counts), axis=1)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            N = nodes.shape[1]
            w.writerow(["mode", *[f"i{d + 1}" for d in range(N)], *[f"x{d + 1}" for d in range(N)],
                        "value"])
            for g in range(self.values.shape[0]):
                for k in range(self.grid.size):
                    w.writerow([g, *sub[k].tolist(), *map(repr, nodes[k].tolist()),
                                repr(float(self.values[g, k]))])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.header(), fh, indent=2, sort_keys=True)


class Solver:
    """Precomputed flow data for one ``(model, delta, n, grid, controls)``."""

    def __init__(self, model: Model, delta: float, n: int, counts=64, controls=None,
                 max_substep: float = 0.05, clamp: bool = False, tol_box: float = 1e-6):
        if not delta > 0:
            raise ValueError("delta must be > 0")
        if n < 1:
            raise ValueError("n must be >= 1")
        if model.invariant_box is None:
            raise SolverError("the solver needs a model with an invariant box")
        self.model = model
        self.delta = float(delta)
        self.n = int(n)
        self.grid = StateGrid.over(model, counts, nodes=True)
        self.controls = controls if controls is not None else control_grid(model, 5)
        self.nodes = grid_nodes(self.grid)
        self.clamp = clamp
        self.tol_box = tol_box
        self._prepare(max_substep)

    # ------------------------------------------------------------------
    def _check_box(self, pts, what):
        ex = self.model.box_excess(pts)
        if np.any(ex > self.tol_box):
            i = int(np.argmax(ex))
            msg = f"{what} {pts[i].tolist()} outside the box by {ex[i]:.3g}"
            if not self.clamp:
                raise SolverError(msg)
            warnings.warn(msg + "; clamping", RuntimeWarning, stacklevel=3)

    def _prepare(self, max_substep: float) -> None:
        from .simulate import _rk4  # shared integrator

        model, delta = self.model, self.delta
        D = 1.0 / self.n
        s = max(1, math.ceil(D / max_substep - 1e-9))
        hs = D / s
        npts = 2 * s + 1
        times = np.linspace(0.0, D, npts)
        simpson = np.zeros(npts)
        simpson[0:-1:2] += hs / 6.0
        simpson[2::2] += hs / 6.0
        simpson[1::2] += 4.0 * hs / 6.0
        self.times = times

        U, V = self.controls
        C = U.shape[0]
        m = self.nodes.shape[0]
        G = model.n_modes
        self.a0 = np.zeros((G, C, m))
        self.B = np.zeros((G, C, m))
        self.eidx = np.zeros((G, C, m, 2 ** sum(c > 1 for c in self.grid.counts)), np.int64)
        self.ewt = np.zeros(self.eidx.shape)
        # jump terms: list per (g, c) of (theta, coef (m, npts), target-set key)
        self.jumps: list[list[list[tuple]]] = [[[] for _ in range(C)] for _ in range(G)]
        self.targets: dict[tuple, np.ndarray] = {}

        for g in range(G):
            gam = np.full(m, g, dtype=np.int64)
            for c in range(C):
                u = np.tile(U[c], (m, 1))
                v = np.tile(V[c], (m, 1))
                path = np.empty((m, npts, model.dim))
                path[:, 0] = self.nodes
                x = self.nodes.copy()
                hvec = np.full(m, hs)
                for k in range(s):
                    x1, xm = _rk4(model, gam, x, u, v, hvec)
                    path[:, 2 * k + 1] = xm
                    path[:, 2 * k + 2] = x1
                    x = x1
                self._check_box(path[:, -1], "flow endpoint")
                flat = path.reshape(-1, model.dim)
                gp = np.repeat(gam, npts)
                up = np.repeat(u, npts, axis=0)
                vp = np.repeat(v, npts, axis=0)
                lam = model.rate(gp, flat, up).reshape(m, npts)
                # cumulative hazard at the sample times
                cum = np.zeros((m, npts))
                for k in range(s):
                    l0, lm, l1 = lam[:, 2 * k], lam[:, 2 * k + 1], lam[:, 2 * k + 2]
                    base = cum[:, 2 * k]
                    cum[:, 2 * k + 1] = base + hs / 24.0 * (5.0 * l0 + 8.0 * lm - l1)
                    cum[:, 2 * k + 2] = base + hs / 6.0 * (l0 + 4.0 * lm + l1)
                disc = np.exp(-cum - delta * times[None, :])
                wq = simpson[None, :] * disc
                hcost = model.cost(gp, flat, up, vp).reshape(m, npts)
                self.a0[g, c] = delta * np.sum(wq * hcost, axis=1)
                self.B[g, c] = disc[:, -1]
                ei, ew = interp_weights(self.grid, path[:, -1])
                self.eidx[g, c] = ei
                self.ewt[g, c] = ew
                Q = model.kernel(gam[:1], U[c][None, :])[0]
                for th in np.nonzero(Q > 0)[0]:
                    tgt = flat + model.jump(gp, np.full(flat.shape[0], th), flat, up, vp)
                    self._check_box(tgt, "post-jump point")
                    key = (int(th), hashlib.sha1(tgt.tobytes()).hexdigest())
                    if key not in self.targets:
                        self.targets[key] = interp_weights(self.grid, tgt)
                    coef = wq * lam * Q[th]
                    self.jumps[g][c].append((int(th), coef, key))
        self._warm = np.zeros((G, m), dtype=np.int64)

    # ------------------------------------------------------------------
    def jump_part(self, w_prev: np.ndarray) -> np.ndarray:
        """``A[g, c, node]``: running cost plus jump term against ``w_prev``."""
        m, npts = self.nodes.shape[0], self.times.size
        vals = {}
        for key, (idx, wt) in self.targets.items():
            vals[key] = np.sum(w_prev[key[0]][idx] * wt, axis=1).reshape(m, npts)
        A = self.a0.copy()
        for g, per_c in enumerate(self.jumps):
            for c, terms in enumerate(per_c):
                for th, coef, key in terms:
                    A[g, c] += np.sum(coef * vals[key], axis=1)
        return A

    def inner_solve(self, A: np.ndarray, g: int, max_iter: int = 500):
        """Policy iteration for ``W = min_c A_c + B_c W(Phi_D)`` in mode ``g``."""
        B, eidx, ewt = self.B[g], self.eidx[g], self.ewt[g]
        m = B.shape[1]
        r = np.arange(m)
        pol = self._warm[g].copy()
        eye = sp.identity(m, format="csr")
        for _ in range(max_iter):
            rows = np.repeat(r, eidx.shape[2])
            data = (B[pol, r][:, None] * ewt[pol, r]).ravel()
            P = sp.csr_matrix((data, (rows, eidx[pol, r].ravel())), shape=(m, m))
            W = spsolve((eye - P).tocsc(), A[g][pol, r])
            Qv = A[g] + B * np.sum(W[eidx] * ewt, axis=2)
            best = Qv.min(axis=0)
            better = Qv[pol, r] - best > 1e-12
            if not np.any(better):
                self._warm[g] = pol
                return W, pol
            pol = np.where(better, Qv.argmin(axis=0), pol)
        raise SolverError(f"policy iteration did not settle in mode {g}")

    def step(self, w_prev: np.ndarray):
        A = self.jump_part(w_prev)
        out = np.empty_like(w_prev)
        arg = np.empty(w_prev.shape, dtype=np.int64)
        for g in range(self.model.n_modes):
            out[g], arg[g] = self.inner_solve(A, g)
        return out, arg

    def table(self, values, argmin=None, **meta) -> ValueTable:
        return ValueTable(self.grid, values, self.delta, self.n, self.controls, argmin, meta)


def bellman_step(model: Model, table: ValueTable, solver: Solver | None = None) -> ValueTable:
    """One level of the jump recursion applied to ``table``."""
    if solver is None:
        solver = Solver(model, table.delta, table.n, table.grid.counts, table.controls)
    if solver.grid != table.grid:
        raise SolverError("table grid does not match the solver grid")
    vals, arg = solver.step(table.values)
    return solver.table(vals, arg)


def _iteration_bound(alpha: float, tol: float, h_max: float) -> int:
    if alpha <= 0.0 or h_max <= 0.0:
        return 2
    b = math.log(tol * (1.0 - alpha) / h_max) / math.log(alpha)
    return max(2, math.ceil(b) + 1)


def solve_discounted(model: Model, delta: float, n: int, controls=None, counts=64,
                     tol: float = 1e-7, *, solver: Solver | None = None,
                     max_substep: float = 0.05):
    """Iterate the recursion from ``w = 0`` until the sup change is at most ``tol``.

    Returns ``(ValueTable, log)``; ``log`` holds one dict per iteration with
    the sup change and its ratio to the previous change.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    solver = solver or Solver(model, delta, n, counts, controls, max_substep=max_substep)
    alpha = contraction_bound(model, delta)
    bound = _iteration_bound(alpha, tol, model.bounds.h_max)
    w = np.zeros((model.n_modes, solver.nodes.shape[0]))
    history = []
    prev = None
    strikes = 0
    for it in range(1, bound + 1):
        w_new, arg = solver.step(w)
        change = float(np.max(np.abs(w_new - w)))
        ratio = change / prev if prev else float("nan")
        history.append({"iteration": it, "sup_change": change, "ratio": ratio})
        log.debug("iteration %d change %.3e ratio %.4f", it, change, ratio)
        w = w_new
        if prev and ratio > alpha + 0.05:
            strikes += 1
            if strikes >= 3:
                raise NonContractionError(
                    f"sup-change ratio above {alpha + 0.05:.4f} for 3 iterations "
                    f"(last {ratio:.4f} at iteration {it})")
        else:
            strikes = 0
        prev = change
        if change <= tol:
            return solver.table(w, arg, iterations=it, tol=tol), history
    raise SolverError(f"no convergence within the guaranteed bound of {bound} iterations")


def step_convergence_study(model: Model, delta: float, n_list, counts=32, controls=None,
                           tol: float = 1e-7, max_substep: float = 0.05):
    """``sup |v^{delta,n} - v^{delta,n_max}|`` for each ``n`` on one grid.

    Returns ``(rows, tables)`` with rows ``(n, sup_diff)``; the last row is
    the reference and has difference 0.
    """
    n_list = [int(k) for k in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    tables = [solve_discounted(model, delta, k, controls, counts, tol,
                               max_substep=max_substep)[0] for k in n_list]
    ref = tables[-1].values
    rows = [(k, float(np.max(np.abs(t.values - ref)))) for k, t in zip(n_list, tables)]
    return rows, tables


def hjb_residual(model: Model, table: ValueTable) -> np.ndarray:
    """``delta v + H(gamma, x, D v, v)`` at interior nodes (NaN elsewhere).

    ``H`` is the max over the table's control grid of
    ``-delta h - <f, p> - lambda sum_theta Q (v(theta, x + g) - v(gamma, x))``
    with ``p`` from central differences.
    """
    grid = table.grid
    nodes = table.nodes()
    m, N = nodes.shape
    G = table.values.shape[0]
    counts = grid.counts
    sub = np.stack(np.unravel_index(np.arange(m), counts), axis=1)
    interior = np.all((sub > 0) & (sub < np.array(counts) - 1), axis=1)
    res = np.full((G, m), np.nan)
    ii = np.nonzero(interior)[0]
    if ii.size == 0:
        return res
    x = nodes[ii]
    U, V = table.controls
    strides = np.array([int(np.prod(counts[d + 1:])) for d in range(N)])
    steps = np.array([(grid.hi[d] - grid.lo[d]) / (counts[d] - 1) for d in range(N)])
    for g in range(G):
        v = table.values[g]
        p = np.stack([(v[ii + strides[d]] - v[ii - strides[d]]) / (2.0 * steps[d])
                      for d in range(N)], axis=1)
        gam = np.full(ii.size, g, dtype=np.int64)
        H = np.full(ii.size, -np.inf)
        for c in range(U.shape[0]):
            u = np.tile(U[c], (ii.size, 1))
            w = np.tile(V[c], (ii.size, 1))
            f = model.flow(gam, x, u, w)
            lam = model.rate(gam, x, u)
            Q = model.kernel(gam, u)
            jump = np.zeros(ii.size)
            for th in np.nonzero(Q[0] > 0)[0]:
                tgt = x + model.jump(gam, np.full(ii.size, th), x, u, w)
                jump += Q[:, th] * (table(th, tgt) - v[ii])
            val = -table.delta * model.cost(gam, x, u, w) - np.sum(f * p, axis=1) - lam * jump
            H = np.maximum(H, val)
        res[g, ii] = table.delta * v[ii] + H
    return res
