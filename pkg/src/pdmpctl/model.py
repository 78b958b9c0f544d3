"""Characteristic data of controlled switch PDMPs.

A :class:`Model` bundles the flow field, jump rate, mode kernel, jump map
and running cost of a switch process whose state is a pair
``(mode, x)`` with ``mode`` in a finite set and ``x`` in ``R^N``.

All characteristic callables are vectorized over a leading batch axis:

* ``flow(gam, x, u, v) -> (n, N)``
* ``rate(gam, x, u) -> (n,)``
* ``kernel(gam, u) -> (n, M)``  (probability rows over the mode set)
* ``jump(gam, theta, x, u, v) -> (n, N)``  (the translation ``g``, not ``x + g``)
* ``cost(gam, x, u, v) -> (n,)``

with ``gam``/``theta`` integer arrays of shape ``(n,)``, ``x`` of shape
``(n, N)`` and controls of shape ``(n, du)`` / ``(n, dv)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Mode",
    "ControlPoint",
    "DeclaredBounds",
    "Model",
    "ModelError",
    "PhageParams",
    "ValidationReport",
    "PHAGE_LABELS",
    "phage_lambda_model",
    "toy_model",
    "flow_field",
    "jump_rate",
    "mode_distribution",
    "jump_map",
    "running_cost",
    "validate_model",
    "control_grid",
]


class ModelError(ValueError):
    """Raised for ill-formed model definitions or arguments."""


@dataclass(frozen=True)
class Mode:
    id: int
    label: str


@dataclass(frozen=True)
class ControlPoint:
    u: tuple[float, ...]
    v: tuple[float, ...] = (0.0,)

    @classmethod
    def of(cls, u, v=0.0) -> "ControlPoint":
        return cls(tuple(np.atleast_1d(np.asarray(u, float)).tolist()),
                   tuple(np.atleast_1d(np.asarray(v, float)).tolist()))


@dataclass(frozen=True)
class DeclaredBounds:
    """Sup-norm and Lipschitz constants declared by a model.

    ``lip_g`` is the Lipschitz constant of the translation ``g`` itself;
    the post-jump map ``x -> x + g`` is checked separately against 1.
    """

    f_max: float
    lambda_max: float
    g_max: float
    h_max: float
    lip_f: float
    lip_lambda: float
    lip_g: float
    lip_h: float


Box = tuple[np.ndarray, np.ndarray]


def _box(lo, hi) -> Box:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ModelError(f"invalid box bounds {lo} / {hi}")
    return lo, hi


@dataclass(frozen=True, eq=False)
class Model:
    name: str
    modes: tuple[Mode, ...]
    dim: int
    u_box: Box
    v_box: Box
    flow: Callable[..., np.ndarray]
    rate: Callable[..., np.ndarray]
    kernel: Callable[..., np.ndarray]
    jump: Callable[..., np.ndarray]
    cost: Callable[..., np.ndarray]
    bounds: DeclaredBounds
    invariant_box: Box | None = None
    # rate and kernel depend on (mode, u) only: the framework required for couplings
    restricted: bool = True
    params: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def du(self) -> int:
        return self.u_box[0].size

    @property
    def dv(self) -> int:
        return self.v_box[0].size

    def mode_index(self, mode: "int | str | Mode") -> int:
        if isinstance(mode, Mode):
            mode = mode.id
        if isinstance(mode, str):
            for m in self.modes:
                if m.label == mode:
                    return m.id
            raise ModelError(f"unknown mode label {mode!r}")
        mode = int(mode)
        if not 0 <= mode < self.n_modes:
            raise ModelError(f"mode {mode} out of range for {self.n_modes} modes")
        return mode

    def in_box(self, x: np.ndarray, tol: float = 1e-6) -> np.ndarray:
        """Row-wise membership of ``x`` in the invariant box, up to ``tol``."""
        x = np.atleast_2d(x)
        if self.invariant_box is None:
            return np.ones(x.shape[0], dtype=bool)
        lo, hi = self.invariant_box
        return np.all((x >= lo - tol) & (x <= hi + tol), axis=1)

    def box_excess(self, x: np.ndarray) -> np.ndarray:
        """Row-wise distance (sup norm) by which ``x`` leaves the invariant box."""
        x = np.atleast_2d(x)
        if self.invariant_box is None:
            return np.zeros(x.shape[0])
        lo, hi = self.invariant_box
        return np.max(np.maximum(np.maximum(lo - x, x - hi), 0.0), axis=1)


# ---------------------------------------------------------------------------
# scalar evaluation helpers
# ---------------------------------------------------------------------------

def _state(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != model.dim:
        raise ModelError(f"state has dimension {x.size}, model expects {model.dim}")
    return x[None, :]


def _controls(model: Model, c: ControlPoint | None):
    if c is None:
        c = ControlPoint(tuple(model.u_box[0]), tuple(model.v_box[0]))
    u = np.asarray(c.u, dtype=float).reshape(1, -1)
    v = np.asarray(c.v, dtype=float).reshape(1, -1)
    if u.shape[1] != model.du or v.shape[1] != model.dv:
        raise ModelError("control dimension mismatch")
    return u, v


def _gam(model: Model, mode) -> np.ndarray:
    return np.array([model.mode_index(mode)])


def flow_field(model: Model, mode, x, c: ControlPoint | None = None) -> np.ndarray:
    u, v = _controls(model, c)
    return model.flow(_gam(model, mode), _state(model, x), u, v)[0]


def jump_rate(model: Model, mode, x, c: ControlPoint | None = None) -> float:
    u, _ = _controls(model, c)
    return float(model.rate(_gam(model, mode), _state(model, x), u)[0])


def mode_distribution(model: Model, mode, c: ControlPoint | None = None) -> np.ndarray:
    u, _ = _controls(model, c)
    return model.kernel(_gam(model, mode), u)[0]


def jump_map(model: Model, mode, theta, x, c: ControlPoint | None = None) -> np.ndarray:
    """Post-jump state ``x + g(mode, theta, x, u, v)``.

    Defined for every target, including those with zero kernel mass.
    """
    u, v = _controls(model, c)
    xs = _state(model, x)
    th = _gam(model, theta)
    return (xs + model.jump(_gam(model, mode), th, xs, u, v))[0]


def running_cost(model: Model, mode, x, c: ControlPoint | None = None) -> float:
    u, v = _controls(model, c)
    return float(model.cost(_gam(model, mode), _state(model, x), u, v)[0])


def control_grid(model: Model, levels: int | Sequence[int] = 5) -> tuple[np.ndarray, np.ndarray]:
    """Uniform product grid over ``U x V``; degenerate dimensions get one point.

    Returns ``(U, V)`` arrays of shape ``(K, du)`` and ``(K, dv)`` with
    row ``k`` the ``k``-th control pair, ordered u-major.
    """
    lo = np.concatenate(model.u_box[0:1] + model.v_box[0:1])
    hi = np.concatenate(model.u_box[1:2] + model.v_box[1:2])
    if isinstance(levels, int):
        levels = [levels] * lo.size
    axes = [np.array([a]) if a == b else np.linspace(a, b, int(k))
            for a, b, k in zip(lo, hi, levels)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    return mesh[:, :model.du].copy(), mesh[:, model.du:].copy()


# ---------------------------------------------------------------------------
# phage lambda
# ---------------------------------------------------------------------------

PHAGE_LABELS = ("D_free", "OR2_active", "OR2_spent", "OR3", "BOTH")
D_FREE, OR2_ACTIVE, OR2_SPENT, OR3, BOTH = range(5)

# jump kinds for the translation table
_NONE, _UNBIND_DIMER, _RELEASE_DIMER, _BURST = range(4)


@dataclass(frozen=True)
class PhageParams:
    alpha: float = 10.0
    u0: float = 0.2
    k2: float = 1.0
    k3: float = 1.0
    k4: float = 1.0
    kt: float = 1.0
    k_m2: float = 0.5
    k_m3: float = 0.5
    k_m4: float = 0.5
    n_burst: float = 5.0

    def __post_init__(self):
        for name in ("alpha", "u0", "k2", "k3", "k4", "kt", "k_m2", "k_m3", "k_m4"):
            if not getattr(self, name) > 0:
                raise ModelError(f"PhageParams.{name} must be strictly positive")
        if not self.n_burst >= 1:
            raise ModelError("PhageParams.n_burst must be >= 1")


def phage_lambda_model(p: PhageParams | None = None, cost: str = "x1") -> Model:
    """Five-mode, two-species hybrid model of the phage lambda repressor switch.

    State ``x = (x1, x2)`` holds repressor monomer and dimer levels in
    ``[0, alpha]^2``; ``U = V = [0, 1]``. The default running cost is the
    normalized repressor level ``x1 / alpha``; ``cost="x2"`` uses the dimer.
    """
    p = p or PhageParams()
    a, u0 = p.alpha, p.u0

    rate_coef = np.array([
        p.k2 + p.k3,
        p.k_m2 + p.k4 + p.kt,
        p.k_m2 + p.k4,
        p.k_m3,
        p.k_m4,
    ])

    Q = np.zeros((5, 5))
    Q[D_FREE, OR2_ACTIVE] = p.k2 / (p.k2 + p.k3)
    Q[D_FREE, OR3] = p.k3 / (p.k2 + p.k3)
    s = p.k_m2 + p.k4 + p.kt
    Q[OR2_ACTIVE, D_FREE] = p.k_m2 / s
    Q[OR2_ACTIVE, BOTH] = p.k4 / s
    Q[OR2_ACTIVE, OR2_SPENT] = p.kt / s
    s = p.k_m2 + p.k4
    Q[OR2_SPENT, D_FREE] = p.k_m2 / s
    Q[OR2_SPENT, BOTH] = p.k4 / s
    Q[OR3, D_FREE] = 1.0
    Q[BOTH, OR2_ACTIVE] = 1.0

    kind = np.full((5, 5), _NONE, dtype=np.int8)
    kind[D_FREE, :] = _UNBIND_DIMER
    for g in (OR2_ACTIVE, OR2_SPENT):
        kind[g, D_FREE] = _RELEASE_DIMER
        kind[g, BOTH] = _UNBIND_DIMER
    kind[OR2_ACTIVE, OR2_SPENT] = _BURST
    kind[OR3, D_FREE] = _RELEASE_DIMER
    kind[BOTH, :] = _RELEASE_DIMER

    def flow(gam, x, u, v):
        uv = (u[:, 0] * v[:, 0])[:, None]
        x1, x2 = x[:, 0], x[:, 1]
        sq = x1 * x1 / a
        out = np.empty_like(x)
        out[:, 0] = -2.0 * sq + 2.0 * x2 - x1
        out[:, 1] = sq - x2
        return uv * out

    def rate(gam, x, u):
        return rate_coef[gam] * (u[:, 0] + u0)

    def kernel(gam, u):
        return Q[gam]

    def jump(gam, theta, x, u, v):
        k = kind[gam, theta]
        out = np.zeros_like(x)
        m = k == _UNBIND_DIMER
        out[m, 1] = -np.minimum(1.0, x[m, 1])
        m = k == _RELEASE_DIMER
        out[m, 1] = np.minimum(1.0, a - x[m, 1])
        m = k == _BURST
        out[m, 0] = np.minimum(p.n_burst, a - x[m, 0])
        return out

    col = {"x1": 0, "x2": 1}[cost]

    def running(gam, x, u, v):
        return x[:, col] / a

    bounds = DeclaredBounds(
        f_max=math.sqrt(10.0) * a,
        lambda_max=float(rate_coef.max() * (1.0 + u0)),
        g_max=max(1.0, min(p.n_burst, a)),
        h_max=1.0,
        lip_f=3.0 + 2.0 * math.sqrt(2.0),
        lip_lambda=0.0,
        lip_g=1.0,
        lip_h=1.0 / a,
    )
    return Model(
        name="phage",
        modes=tuple(Mode(i, lab) for i, lab in enumerate(PHAGE_LABELS)),
        dim=2,
        u_box=_box([0.0], [1.0]),
        v_box=_box([0.0], [1.0]),
        flow=flow,
        rate=rate,
        kernel=kernel,
        jump=jump,
        cost=running,
        bounds=bounds,
        invariant_box=_box([0.0, 0.0], [a, a]),
        restricted=True,
        params={"phage": p, "cost": cost},
    )


# ---------------------------------------------------------------------------
# analytic toys
# ---------------------------------------------------------------------------

def _zeros_like_x(gam, theta, x, u, v):
    return np.zeros_like(x)


def toy_model(kind: str, *, c: float = 0.7, rate: float = 1.0) -> Model:
    """Small models with closed-form value functions, used as oracles.

    ``constant_cost``
        one mode, no motion, ``h = c``.
    ``decay_1d``
        one mode on ``K = [0, 1]``, ``f = -x``, ``h = x``.
    ``flipflop``
        two modes switching at rate ``rate`` both ways, no motion,
        ``h = 1`` in mode A and ``0`` in mode B.
    ``controlled_decay``
        ``f = -u x`` with ``u`` in ``[0, 1]``, ``h = x``.
    ``expansive``, ``drift_v``
        ``f = +x`` and ``f = v`` with ``v`` in ``[-1, 1]``; fixtures for the
        nonexpansivity check (``K`` is not invariant for them).
    """
    one = (Mode(0, "0"),)
    unit = _box([0.0], [1.0])
    deg_u = _box([0.0], [0.0])
    deg_v = _box([0.0], [0.0])

    def no_rate(gam, x, u):
        return np.zeros(gam.shape[0])

    def one_kernel(gam, u):
        return np.ones((gam.shape[0], 1))

    if kind == "constant_cost":
        return Model(
            name=kind, modes=one, dim=1, u_box=deg_u, v_box=deg_v,
            flow=lambda gam, x, u, v: np.zeros_like(x),
            rate=no_rate, kernel=one_kernel, jump=_zeros_like_x,
            cost=lambda gam, x, u, v: np.full(gam.shape[0], c),
            bounds=DeclaredBounds(0.0, 0.0, 0.0, abs(c), 0.0, 0.0, 0.0, 0.0),
            invariant_box=unit, params={"c": c},
        )
    if kind == "decay_1d":
        return Model(
            name=kind, modes=one, dim=1, u_box=deg_u, v_box=deg_v,
            flow=lambda gam, x, u, v: -x,
            rate=no_rate, kernel=one_kernel, jump=_zeros_like_x,
            cost=lambda gam, x, u, v: x[:, 0].copy(),
            bounds=DeclaredBounds(1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0),
            invariant_box=unit,
        )
    if kind == "controlled_decay":
        return Model(
            name=kind, modes=one, dim=1, u_box=unit, v_box=deg_v,
            flow=lambda gam, x, u, v: -u[:, :1] * x,
            rate=no_rate, kernel=one_kernel, jump=_zeros_like_x,
            cost=lambda gam, x, u, v: x[:, 0].copy(),
            bounds=DeclaredBounds(1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0),
            invariant_box=unit,
        )
    if kind == "flipflop":
        Q = np.array([[0.0, 1.0], [1.0, 0.0]])
        h = np.array([1.0, 0.0])
        return Model(
            name=kind, modes=(Mode(0, "A"), Mode(1, "B")), dim=1,
            u_box=deg_u, v_box=deg_v,
            flow=lambda gam, x, u, v: np.zeros_like(x),
            rate=lambda gam, x, u: np.full(gam.shape[0], float(rate)),
            kernel=lambda gam, u: Q[gam],
            jump=_zeros_like_x,
            cost=lambda gam, x, u, v: h[gam],
            bounds=DeclaredBounds(0.0, float(rate), 0.0, 1.0, 0.0, 0.0, 0.0, 0.0),
            invariant_box=unit, params={"rate": rate},
        )
    if kind == "expansive":
        return Model(
            name=kind, modes=one, dim=1, u_box=deg_u, v_box=deg_v,
            flow=lambda gam, x, u, v: x.copy(),
            rate=no_rate, kernel=one_kernel, jump=_zeros_like_x,
            cost=lambda gam, x, u, v: x[:, 0].copy(),
            bounds=DeclaredBounds(1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0),
            invariant_box=unit,
        )
    if kind == "drift_v":
        return Model(
            name=kind, modes=one, dim=1, u_box=deg_u, v_box=_box([-1.0], [1.0]),
            flow=lambda gam, x, u, v: v[:, :1].copy(),
            rate=no_rate, kernel=one_kernel, jump=_zeros_like_x,
            cost=lambda gam, x, u, v: x[:, 0].copy(),
            bounds=DeclaredBounds(1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            invariant_box=unit,
        )
    raise ModelError(f"unknown toy model {kind!r}")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    samples: int
    violations: dict[str, int]
    worst: dict[str, tuple[float, dict]]
    empirical: dict[str, float]

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())

    def rows(self):
        for key in sorted(self.empirical):
            w = self.worst.get(key, (float("nan"), {}))
            yield key, self.empirical[key], self.violations.get(key, 0), w[1]


def _sample_controls(model: Model, rng: np.random.Generator, n: int):
    (ulo, uhi), (vlo, vhi) = model.u_box, model.v_box
    u = ulo + (uhi - ulo) * rng.random((n, model.du))
    v = vlo + (vhi - vlo) * rng.random((n, model.dv))
    return u, v


def _sample_states(model: Model, rng: np.random.Generator, n: int):
    if model.invariant_box is None:
        lo, hi = -np.ones(model.dim), np.ones(model.dim)
    else:
        lo, hi = model.invariant_box
    return lo + (hi - lo) * rng.random((n, model.dim))


def validate_model(model: Model, sample_count: int = 10_000, rng_seed: int = 0,
                   rtol: float = 1e-9, atol: float = 1e-12) -> ValidationReport:
    """Spot-check declared bounds, Lipschitz constants and kernel rows.

    Samples ``(mode, x, y, u, v)`` uniformly over modes, the invariant box
    and the control boxes. Report-only: nothing is raised.
    """
    if sample_count < 1:
        raise ModelError("sample_count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = int(sample_count)
    b = model.bounds
    gam = rng.integers(0, model.n_modes, n)
    theta = rng.integers(0, model.n_modes, n)
    x = _sample_states(model, rng, n)
    y = _sample_states(model, rng, n)
    u, v = _sample_controls(model, rng, n)
    dxy = np.linalg.norm(x - y, axis=1)
    safe = np.where(dxy > 0, dxy, np.inf)

    fx, fy = model.flow(gam, x, u, v), model.flow(gam, y, u, v)
    lx, ly = model.rate(gam, x, u), model.rate(gam, y, u)
    gx, gy = model.jump(gam, theta, x, u, v), model.jump(gam, theta, y, u, v)
    hx, hy = model.cost(gam, x, u, v), model.cost(gam, y, u, v)
    Qx = model.kernel(gam, u)

    checks = {
        "f_max": (np.linalg.norm(fx, axis=1), b.f_max),
        "lambda_max": (lx, b.lambda_max),
        "lambda_nonneg": (-lx, 0.0),
        "g_max": (np.linalg.norm(gx, axis=1), b.g_max),
        "h_max": (np.abs(hx), b.h_max),
        "lip_f": (np.linalg.norm(fx - fy, axis=1) / safe, b.lip_f),
        "lip_lambda": (np.abs(lx - ly) / safe, b.lip_lambda),
        "lip_g": (np.linalg.norm(gx - gy, axis=1) / safe, b.lip_g),
        "lip_h": (np.abs(hx - hy) / safe, b.lip_h),
        "lip_jump_map": (np.linalg.norm(x + gx - y - gy, axis=1) / safe, 1.0),
        "kernel_sum": (np.abs(Qx.sum(axis=1) - 1.0), 0.0),
        "kernel_self": (np.abs(Qx[np.arange(n), gam]) if model.n_modes > 1
                        else np.zeros(n), 0.0),
        "kernel_nonneg": (-Qx.min(axis=1), 0.0),
    }
    violations: dict[str, int] = {}
    worst: dict[str, tuple[float, dict]] = {}
    empirical: dict[str, float] = {}
    for key, (vals, bound) in checks.items():
        vals = np.where(np.isfinite(vals), vals, np.inf)
        limit = bound * (1 + rtol) + atol
        violations[key] = int(np.sum(vals > limit))
        i = int(np.argmax(vals))
        empirical[key] = float(vals[i])
        worst[key] = (float(vals[i]), {
            "mode": int(gam[i]), "theta": int(theta[i]),
            "x": x[i].tolist(), "y": y[i].tolist(),
            "u": u[i].tolist(), "v": v[i].tolist(),
        })
    return ValidationReport(samples=n, violations=violations, worst=worst,
                            empirical=empirical)
