"""Open-loop controls restarted at jumps.

Every policy maps the data frozen at the last jump, ``(mode, state)``, the
jump index ``k`` and the time elapsed since that jump to a control pair
``(u, v)``. Stepped policies hold their value on the cells
``((j)/n, (j+1)/n]`` with the ``t = 0`` value taken from cell 0.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .model import ControlPoint, Model

__all__ = [
    "StateGrid",
    "Policy",
    "Constant",
    "SteppedOpenLoop",
    "FeedbackGrid",
    "FamilySpec",
    "FamilyTooLarge",
    "evaluate_policy",
    "enumerate_policy_family",
    "cell_index",
    "policy_from_json",
]


class FamilyTooLarge(ValueError):
    pass


def cell_index(t, n: int) -> np.ndarray:
    """Index ``j`` of the cell ``(j/n, (j+1)/n]`` containing ``t`` (0 at ``t = 0``)."""
    t = np.asarray(t, dtype=float)
    return np.maximum(np.ceil(t * n) - 1, 0).astype(np.int64)


@dataclass(frozen=True)
class StateGrid:
    """Uniform quantization of a box for nearest-point table lookup.

    With ``nodes=True`` the points are ``linspace(lo, hi, count)``;
    otherwise they are the centers of ``count`` equal cells.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    counts: tuple[int, ...]
    nodes: bool = False

    @classmethod
    def single(cls, dim: int) -> "StateGrid":
        return cls((0.0,) * dim, (1.0,) * dim, (1,) * dim)

    @classmethod
    def over(cls, model: Model, counts, nodes: bool = False) -> "StateGrid":
        if model.invariant_box is None:
            raise ValueError("state grids need a model with an invariant box")
        lo, hi = model.invariant_box
        counts = (counts,) * model.dim if isinstance(counts, int) else tuple(counts)
        return cls(tuple(map(float, lo)), tuple(map(float, hi)),
                   tuple(int(c) for c in counts), nodes)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def lookup(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        idx = np.zeros(x.shape[0], dtype=np.int64)
        for d, c in enumerate(self.counts):
            if c == 1:
                i = np.zeros(x.shape[0], dtype=np.int64)
            else:
                span = self.hi[d] - self.lo[d]
                r = (x[:, d] - self.lo[d]) / span
                if self.nodes:
                    i = np.rint(r * (c - 1))
                else:
                    i = np.floor(r * c)
                i = np.clip(i, 0, c - 1).astype(np.int64)
            idx = idx * c + i
        return idx

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi),
                "counts": list(self.counts), "nodes": self.nodes}


class Policy:
    """Base class. Subclasses set ``n`` (or None) and ``feedback``."""

    n: int | None = None
    feedback: bool = False
    label: str = ""

    def control(self, gam: np.ndarray, y: np.ndarray, j: np.ndarray,
                k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Constant(Policy):
    def __init__(self, u, v=0.0, label: str = ""):
        self.u = np.atleast_1d(np.asarray(u, dtype=float))
        self.v = np.atleast_1d(np.asarray(v, dtype=float))
        self.label = label or f"const(u={self.u.tolist()},v={self.v.tolist()})"

    def control(self, gam, y, j, k):
        n = gam.shape[0]
        return np.tile(self.u, (n, 1)), np.tile(self.v, (n, 1))

    def to_dict(self):
        return {"kind": "Constant", "u": self.u.tolist(), "v": self.v.tolist()}


class SteppedOpenLoop(Policy):
    """Piecewise-constant-in-time policy with step ``1/n``.

    ``table`` has shape ``(depth, n_modes, grid.size, n_steps, du + dv)``.
    Jump indices past ``depth`` wrap around; step indices past ``n_steps``
    hold the last step's value.
    """

    def __init__(self, n: int, table: np.ndarray, du: int, grid: StateGrid | None = None,
                 label: str = ""):
        table = np.asarray(table, dtype=float)
        if table.ndim != 5:
            raise ValueError("table must have shape (depth, modes, cells, steps, du+dv)")
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = int(n)
        self.table = table
        self.du = int(du)
        self.grid = grid or StateGrid((0.0,), (1.0,), (1,))
        if self.grid.size != table.shape[2]:
            raise ValueError("grid size does not match table")
        self.label = label or f"stepped(n={n})"

    @property
    def depth(self) -> int:
        return self.table.shape[0]

    @property
    def n_steps(self) -> int:
        return self.table.shape[3]

    def control(self, gam, y, j, k):
        cell = self.grid.lookup(y)
        jj = np.minimum(j, self.n_steps - 1)
        c = self.table[k % self.depth, gam, cell, jj]
        return c[:, :self.du].copy(), c[:, self.du:].copy()

    def refine(self, factor: int = 2) -> "SteppedOpenLoop":
        """Same policy expressed with step ``1/(factor n)``."""
        table = np.repeat(self.table, factor, axis=3)
        return SteppedOpenLoop(self.n * factor, table, self.du, self.grid, self.label)

    @classmethod
    def shared(cls, model: Model, n: int, steps: Sequence[tuple], label: str = ""):
        """Same control sequence for every mode, cell and jump index."""
        rows = [np.concatenate([np.atleast_1d(np.asarray(u, float)),
                                np.atleast_1d(np.asarray(v, float))]) for u, v in steps]
        table = np.broadcast_to(np.array(rows)[None, None, None],
                                (1, model.n_modes, 1, len(rows), model.du + model.dv))
        return cls(n, table.copy(), model.du, StateGrid.single(model.dim), label)

    @classmethod
    def random(cls, model: Model, n: int, n_steps: int, seed: int, cells: int = 4,
               depth: int = 8, levels: int = 3, label: str = ""):
        """Random table over a ``levels``-point control grid (for experiments)."""
        from .model import control_grid
        U, V = control_grid(model, levels)
        grid = StateGrid.over(model, cells) if model.invariant_box is not None \
            else StateGrid.single(model.dim)
        rng = np.random.default_rng(seed)
        pick = rng.integers(0, U.shape[0], (depth, model.n_modes, grid.size, n_steps))
        table = np.concatenate([U[pick], V[pick]], axis=-1)
        return cls(n, table, model.du, grid, label or f"random(n={n},seed={seed})")

    def to_dict(self):
        return {"kind": "SteppedOpenLoop", "n": self.n, "du": self.du,
                "grid": self.grid.to_dict(), "table": self.table.tolist(),
                "label": self.label}


class FeedbackGrid(Policy):
    """Control looked up from the current state on a quantized grid.

    With ``n=None`` the lookup is redone at every integrator step. With an
    integer ``n`` it is redone only at the breakpoints ``j/n`` since the
    last jump (and right after jumps), which keeps the policy in the
    stepped open-loop class: between jumps the state is a deterministic
    function of the post-jump data.
    """

    def __init__(self, table: np.ndarray, du: int, grid: StateGrid, n: int | None = None,
                 label: str = ""):
        table = np.asarray(table, dtype=float)
        if table.ndim != 3 or table.shape[1] != grid.size:
            raise ValueError("table must have shape (modes, grid.size, du+dv)")
        self.table = table
        self.du = int(du)
        self.grid = grid
        self.n = None if n is None else int(n)
        self.feedback = True
        self.label = label or "feedback"

    def control(self, gam, y, j, k):
        c = self.table[gam, self.grid.lookup(y)]
        return c[:, :self.du].copy(), c[:, self.du:].copy()

    def to_dict(self):
        return {"kind": "FeedbackGrid", "n": self.n, "du": self.du,
                "grid": self.grid.to_dict(), "table": self.table.tolist(),
                "label": self.label}


def policy_from_json(text: str | dict) -> Policy:
    d = json.loads(text) if isinstance(text, str) else text
    kind = d["kind"]
    if kind == "Constant":
        return Constant(d["u"], d["v"])
    grid = StateGrid(tuple(d["grid"]["lo"]), tuple(d["grid"]["hi"]),
                     tuple(d["grid"]["counts"]), bool(d["grid"]["nodes"]))
    if kind == "SteppedOpenLoop":
        return SteppedOpenLoop(d["n"], np.array(d["table"]), d["du"], grid, d.get("label", ""))
    if kind == "FeedbackGrid":
        return FeedbackGrid(np.array(d["table"]), d["du"], grid, d["n"], d.get("label", ""))
    raise ValueError(f"unknown policy kind {kind!r}")


def evaluate_policy(p: Policy, mode_last: int, y_last, t_since_jump: float,
                    jump_index: int = 0) -> ControlPoint:
    if t_since_jump < 0:
        raise ValueError("t_since_jump must be >= 0")
    y = np.atleast_2d(np.asarray(y_last, dtype=float))
    j = cell_index(t_since_jump, p.n) if p.n is not None else 0
    u, v = p.control(np.array([int(mode_last)]), y, np.atleast_1d(j),
                     np.array([int(jump_index)]))
    return ControlPoint(tuple(u[0].tolist()), tuple(v[0].tolist()))


@dataclass(frozen=True)
class FamilySpec:
    """Finite search space of policies.

    ``kind="constant"``: one policy per control-grid point.
    ``kind="stepped"``: sequences of ``n_steps`` control-grid points shared
    by all modes, states and jump indices, with step ``1/n``.
    """

    kind: str = "constant"
    u_levels: tuple[float, ...] = (0.0, 0.5, 1.0)
    v_levels: tuple[float, ...] = (0.0, 1.0)
    n: int = 1
    n_steps: int = 1
    cap: int = 10**6

    def size(self, model: Model | None = None) -> int:
        base = self._levels_count(model)
        if self.kind == "constant":
            return base
        if self.kind == "stepped":
            return base ** self.n_steps
        raise ValueError(f"unknown family kind {self.kind!r}")

    def _levels_count(self, model: Model | None) -> int:
        nu = len(self.u_levels) ** (model.du if model else 1)
        nv = len(self.v_levels) ** (model.dv if model else 1)
        return nu * nv

    def controls(self, model: Model) -> list[tuple[np.ndarray, np.ndarray]]:
        us = [np.array(c) for c in itertools.product(self.u_levels, repeat=model.du)]
        vs = [np.array(c) for c in itertools.product(self.v_levels, repeat=model.dv)]
        return [(u, v) for u in us for v in vs]


def enumerate_policy_family(spec: FamilySpec, model: Model) -> Iterator[Policy]:
    size = spec.size(model)
    if size > spec.cap:
        raise FamilyTooLarge(f"policy family has {size} members, cap is {spec.cap}")
    grid = spec.controls(model)
    if spec.kind == "constant":
        for i, (u, v) in enumerate(grid):
            yield Constant(u, v, label=f"p{i}:const(u={u.tolist()},v={v.tolist()})")
        return
    width = max(1, int(math.log10(max(size, 1))) + 1)
    for i, combo in enumerate(itertools.product(grid, repeat=spec.n_steps)):
        steps = [(u, v) for u, v in combo]
        desc = ",".join(f"{u.tolist()}/{v.tolist()}" for u, v in steps)
        yield SteppedOpenLoop.shared(model, spec.n, steps,
                                     label=f"p{i:0{width}d}:stepped(n={spec.n};{desc})")
