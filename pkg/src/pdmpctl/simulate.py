"""Exact simulation of controlled switch PDMPs.

Between jumps the state follows the flow of the current mode, integrated
with classical RK4 on steps that never straddle a control breakpoint.
Jump times come from inverting the cumulative hazard against an Exp(1)
threshold; post-jump modes are drawn by inverse CDF over the fixed mode
ordering.

Ensembles run many paths in lockstep numpy arrays. Each path owns its
random stream, derived from ``(seed, path index)``, and consumes it in a
fixed order (threshold, then per jump: mode uniform, next threshold), so
a path's realization does not depend on which other paths share its batch
or on the number of threads.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ControlPoint, Model, ModelError
from .policy import Constant, Policy

__all__ = [
    "RngStream",
    "SimOptions",
    "Segment",
    "Trajectory",
    "EnsembleResult",
    "InvarianceError",
    "IntegrationError",
    "NO_JUMP",
    "integrate_flow",
    "sample_jump_time",
    "sample_post_jump",
    "simulate_trajectory",
    "simulate_ensemble",
    "simpson_weights",
]

NO_JUMP = None
_SNAP = 1e-9  # relative slack for snapping a step onto a breakpoint


class InvarianceError(RuntimeError):
    pass


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RngStream:
    """Seed plus stream index; purpose tags separate independent sub-streams."""

    seed: int
    stream_index: int = 0

    def generator(self, purpose: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_index), purpose))
        return np.random.default_rng(ss)


@dataclass(frozen=True)
class SimOptions:
    dt: float = 1e-2
    invariance_tol: float = 1e-6
    on_violation: str = "raise"  # or "clamp"
    bisect_tol: float = 1e-10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.on_violation not in ("raise", "clamp"):
            raise ValueError("on_violation must be 'raise' or 'clamp'")


def simpson_weights(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Simpson weights for the endpoints and midpoint of steps of length ``h``."""
    return h / 6.0, 4.0 * h / 6.0


# ---------------------------------------------------------------------------
# low-level kernels
# ---------------------------------------------------------------------------

def _rk4(model: Model, gam, x, u, v, h):
    """One RK4 step of length ``h`` (per row) plus a cubic Hermite midpoint."""
    hh = h[:, None]
    k1 = model.flow(gam, x, u, v)
    k2 = model.flow(gam, x + 0.5 * hh * k1, u, v)
    k3 = model.flow(gam, x + 0.5 * hh * k2, u, v)
    k4 = model.flow(gam, x + hh * k3, u, v)
    x1 = x + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    f1 = model.flow(gam, x1, u, v)
    xm = 0.5 * (x + x1) + hh / 8.0 * (k1 - f1)
    return x1, xm


def _hazard(model: Model, gam, x, xm, x1, u, h):
    if model.restricted:
        lam = model.rate(gam, x, u)
        return h * lam, lam
    l0 = model.rate(gam, x, u)
    lm = model.rate(gam, xm, u)
    l1 = model.rate(gam, x1, u)
    return h / 6.0 * (l0 + 4.0 * lm + l1), l0


def _pick_mode(P: np.ndarray, U: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(P, axis=1)
    total = cdf[:, -1]
    if np.any(total <= 0):
        raise ModelError("degenerate mode distribution (all zero)")
    return np.argmax(cdf > (U * total)[:, None], axis=1)


class _Uniforms:
    """Buffered per-path uniform streams."""

    def __init__(self, seed: int, streams: np.ndarray, purpose: int = 0, block: int = 64):
        self.gens = [RngStream(seed, int(s)).generator(purpose) for s in streams]
        self.block = block
        self.buf = np.empty((len(self.gens), block))
        for i, g in enumerate(self.gens):
            self.buf[i] = g.random(block)
        self.pos = np.zeros(len(self.gens), dtype=np.int64)

    def take(self, rows: np.ndarray) -> np.ndarray:
        """Next uniform for each (distinct) row in ``rows``."""
        if rows.size == 0:
            return np.empty(0)
        empty = rows[self.pos[rows] >= self.block]
        for r in empty:
            self.buf[r] = self.gens[r].random(self.block)
            self.pos[r] = 0
        out = self.buf[rows, self.pos[rows]]
        self.pos[rows] += 1
        return out


# ---------------------------------------------------------------------------
# public data types
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    """Flow samples between two jumps.

    ``t`` and ``x`` hold step endpoints; ``x_mid``, ``u``, ``v`` are per step.
    """

    mode: int
    t: np.ndarray
    x: np.ndarray
    x_mid: np.ndarray
    u: np.ndarray
    v: np.ndarray


@dataclass
class Trajectory:
    jump_times: list[float]
    post_jump_modes: list[int]
    post_jump_states: list[np.ndarray]
    segments: list[Segment]
    horizon: float
    seed: int
    stream: int = 0

    def csv_rows(self):
        """Rows ``(t, mode_id, x..., u..., v..., event)`` at step endpoints."""
        for k, seg in enumerate(self.segments):
            for i in range(len(seg.t)):
                s = min(i, len(seg.u) - 1)
                ev = "jump" if (i == 0 and k > 0) else ""
                yield [seg.t[i], seg.mode, *seg.x[i], *seg.u[s], *seg.v[s], ev]


@dataclass
class EnsembleResult:
    n_paths: int
    horizon: float
    delta: float | None
    abel: np.ndarray
    integral: np.ndarray
    n_jumps: np.ndarray
    max_excess: np.ndarray
    terminal_mode: np.ndarray
    terminal_state: np.ndarray
    trajectories: list[Trajectory] | None = None
    atoms: dict | None = None
    shadow: dict | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# stand-alone operations
# ---------------------------------------------------------------------------

def _as_control(c) -> Callable[[float], ControlPoint]:
    if isinstance(c, ControlPoint):
        return lambda t: c
    return c


def _time_grid(duration: float, step: float, breakpoints: Sequence[float] = ()) -> np.ndarray:
    n = max(1, int(math.ceil(duration / step - 1e-9)))
    grid = np.linspace(0.0, duration, n + 1)
    extra = [b for b in breakpoints if 0 < b < duration]
    if extra:
        grid = np.unique(np.concatenate([grid, extra]))
    return grid


def integrate_flow(model: Model, mode, x0, control, duration: float, step: float = 1e-2,
                   breakpoints: Sequence[float] = ()):
    """Fixed-step RK4 path of the flow from ``x0`` for ``duration``.

    ``control`` is a :class:`ControlPoint` or a callable ``t -> ControlPoint``;
    substeps are split at ``breakpoints`` and the control is read at each
    substep's midpoint. Returns ``(times, states)``.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if step <= 0:
        raise ValueError("step must be > 0")
    ctrl = _as_control(control)
    gam = np.array([model.mode_index(mode)])
    x = np.asarray(x0, dtype=float).reshape(1, -1)
    if duration == 0:
        return np.zeros(1), x.copy()
    times = _time_grid(duration, step, breakpoints)
    out = np.empty((times.size, model.dim))
    out[0] = x[0]
    for i in range(times.size - 1):
        h = times[i + 1] - times[i]
        c = ctrl(0.5 * (times[i] + times[i + 1]))
        u = np.asarray(c.u, float).reshape(1, -1)
        v = np.asarray(c.v, float).reshape(1, -1)
        x, _ = _rk4(model, gam, x, u, v, np.array([h]))
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at t={times[i + 1]:.6g}: previous state "
                                   f"{out[i].tolist()}")
        out[i + 1] = x[0]
    return times, out


def sample_jump_time(model: Model, mode, x0, control, rng: RngStream | None = None, *,
                     cap: float = 100.0, step: float = 1e-2, uniform: float | None = None,
                     breakpoints: Sequence[float] = (), tol: float = 1e-10):
    """First jump time by cumulative-hazard inversion.

    Draws ``E = -log(1 - U)`` from one uniform (``uniform`` overrides the
    stream) and returns ``(T, state just before T)``, or ``(NO_JUMP, state
    at cap)`` if the hazard stays below ``E`` up to ``cap``.
    """
    if uniform is None:
        if rng is None:
            raise ValueError("need an RngStream or an explicit uniform")
        uniform = float(rng.generator().random())
    E = -math.log1p(-uniform)
    ctrl = _as_control(control)
    gam = np.array([model.mode_index(mode)])
    x = np.asarray(x0, dtype=float).reshape(1, -1)
    times = _time_grid(cap, step, breakpoints)
    lam_acc = 0.0
    for i in range(times.size - 1):
        h = times[i + 1] - times[i]
        c = ctrl(0.5 * (times[i] + times[i + 1]))
        u = np.asarray(c.u, float).reshape(1, -1)
        v = np.asarray(c.v, float).reshape(1, -1)
        x1, xm = _rk4(model, gam, x, u, v, np.array([h]))
        dl, _ = _hazard(model, gam, x, xm, x1, u, np.array([h]))
        if lam_acc + dl[0] >= E:
            lo, hi = 0.0, h
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                xa, xb = _rk4(model, gam, x, u, v, np.array([mid]))
                d, _ = _hazard(model, gam, x, xb, xa, u, np.array([mid]))
                if lam_acc + d[0] >= E:
                    hi = mid
                else:
                    lo = mid
            xa, _ = _rk4(model, gam, x, u, v, np.array([hi]))
            return times[i] + hi, xa[0]
        lam_acc += dl[0]
        x = x1
    return NO_JUMP, x[0]


def sample_post_jump(model: Model, mode, x_pre, c: ControlPoint, rng: RngStream | None = None,
                     *, uniform: float | None = None):
    """Draw the post-jump mode by inverse CDF and apply the jump map."""
    if uniform is None:
        if rng is None:
            raise ValueError("need an RngStream or an explicit uniform")
        uniform = float(rng.generator().random())
    gam = np.array([model.mode_index(mode)])
    x = np.asarray(x_pre, dtype=float).reshape(1, -1)
    u = np.asarray(c.u, float).reshape(1, -1)
    v = np.asarray(c.v, float).reshape(1, -1)
    theta = _pick_mode(model.kernel(gam, u), np.array([uniform]))
    return int(theta[0]), (x + model.jump(gam, theta, x, u, v))[0]


# ---------------------------------------------------------------------------
# occupation atom recording
# ---------------------------------------------------------------------------

class _AtomRecorder:
    """Collects discounted occupation atoms, optionally thinned by time strata."""

    def __init__(self, n: int, dim: int, du: int, dv: int, strata: int | None,
                 horizon: float, uniforms: _Uniforms | None):
        self.strata = strata
        self.horizon = horizon
        self.unif = uniforms
        if strata is None:
            self.parts: list[tuple] = []
        else:
            self.gam = np.zeros((n, strata), dtype=np.int64)
            self.x = np.zeros((n, strata, dim))
            self.u = np.zeros((n, strata, du))
            self.v = np.zeros((n, strata, dv))
            self.W = np.zeros((n, strata))

    def add(self, rows, gam, tau, x, u, v, w):
        if self.strata is None:
            self.parts.append((rows.copy(), gam.copy(), x.copy(), u.copy(), v.copy(), w.copy()))
            return
        s = np.minimum((tau / self.horizon * self.strata).astype(np.int64), self.strata - 1)
        Wn = self.W[rows, s] + w
        U = self.unif.take(rows)
        rep = U * Wn < w
        r, ss = rows[rep], s[rep]
        self.gam[r, ss] = gam[rep]
        self.x[r, ss] = x[rep]
        self.u[r, ss] = u[rep]
        self.v[r, ss] = v[rep]
        self.W[rows, s] = Wn

    def finish(self, path_offset: int) -> dict:
        if self.strata is None:
            if not self.parts:
                return {}
            rows, gam, x, u, v, w = (np.concatenate(z) for z in zip(*self.parts))
            order = np.argsort(rows, kind="stable")
            return {"path": rows[order] + path_offset, "mode": gam[order], "x": x[order],
                    "u": u[order], "v": v[order], "weight": w[order]}
        keep = self.W > 0
        rows = np.nonzero(keep)[0]
        return {"path": rows + path_offset, "mode": self.gam[keep], "x": self.x[keep],
                "u": self.u[keep], "v": self.v[keep], "weight": self.W[keep]}


def _merge_atoms(parts: list[dict]) -> dict | None:
    parts = [p for p in parts if p]
    if not parts:
        return None
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------------------
# ensemble engine
# ---------------------------------------------------------------------------

@dataclass
class _Config:
    model: Model
    policy: Policy
    horizon: float
    seed: int
    opts: SimOptions
    delta: float | None
    n_total: int
    record: bool
    strata: int | None  # None: record all atoms; 0: no atoms
    shadow: object | None
    breakpoint_n: int | None
    feedback_each_step: bool


def _run_batch(cfg: _Config, gamma0: np.ndarray, x0: np.ndarray, y0: np.ndarray | None,
               start: int) -> dict:
    model, pol, H, opts = cfg.model, cfg.policy, cfg.horizon, cfg.opts
    n = x0.shape[0]
    N = model.dim
    dt, tol = opts.dt, opts.invariance_tol
    delta = cfg.delta
    nbp = cfg.breakpoint_n
    width = 1.0 / nbp if nbp else math.inf
    streams = np.arange(start, start + n)
    unif = _Uniforms(cfg.seed, streams, purpose=0)
    shadow = cfg.shadow

    # per-path working state (compacted as paths finish)
    ids = np.arange(n)
    t = np.zeros(n)
    gam = gamma0.astype(np.int64).copy()
    x = x0.astype(float).copy()
    T_last = np.zeros(n)
    k = np.zeros(n, dtype=np.int64)
    j = np.zeros(n, dtype=np.int64)
    cell_end = np.full(n, width)
    Lam = np.zeros(n)
    E = -np.log1p(-unif.take(ids))
    gam_last = gam.copy()
    y_last = x.copy()
    u, v = pol.control(gam_last, y_last, j, k)

    # outputs indexed by original row
    out_abel = np.zeros(n)
    out_int = np.zeros(n)
    out_jumps = np.zeros(n, dtype=np.int64)
    out_excess = np.zeros(n)
    out_tmode = np.zeros(n, dtype=np.int64)
    out_tstate = np.zeros((n, N))
    out_tu = np.zeros((n, model.du))
    out_tv = np.zeros((n, model.dv))
    tail = math.exp(-delta * H) if delta is not None else 0.0
    abel = np.zeros(n)
    integ = np.zeros(n)
    excess = model.box_excess(x)

    record_atoms = cfg.strata != 0 and delta is not None
    atoms = atoms_y = None
    if record_atoms:
        thin = None if cfg.strata is None else _Uniforms(cfg.seed, streams, purpose=1, block=256)
        atoms = _AtomRecorder(n, N, model.du, model.dv, cfg.strata, H, thin)

    if shadow is not None:
        y = y0.astype(float).copy()
        d0sq = np.sum((x - y) ** 2, axis=1)
        w, min_sel = shadow.select(gam, x, y, u, v, t=np.zeros(n))
        gap = np.zeros(n)
        supgap = np.sqrt(d0sq)
        cfit = np.zeros(n)
        yexcess = model.box_excess(y)
        out_gap = np.zeros(n)
        out_sup = np.zeros(n)
        out_cfit = np.zeros(n)
        out_yexcess = np.zeros(n)
        out_ytstate = np.zeros((n, N))
        out_tw = np.zeros((n, model.dv))
        out_min_sel = np.full(n, -np.inf)
        if record_atoms:
            thin_y = None if cfg.strata is None else _Uniforms(cfg.seed, streams, purpose=2,
                                                                block=256)
            atoms_y = _AtomRecorder(n, N, model.du, model.dv, cfg.strata, H, thin_y)
        k0 = shadow.k0
        nref = shadow.n

    rec = [] if cfg.record else None
    if rec is not None:
        jumps_log = [[(0.0, int(gam[i]), x[i].copy(),
                       None if shadow is None else y[i].copy())] for i in range(n)]

    def guard(states, which, rows, times):
        ex = model.box_excess(states)
        bad = ex > tol
        if np.any(bad):
            i = int(np.nonzero(bad)[0][0])
            if opts.on_violation == "raise":
                raise InvarianceError(
                    f"{which} left the invariant set by {ex[i]:.3g} at t={times[i]:.10g} "
                    f"(path {start + ids[rows[i]] if rows is not None else start + ids[i]}, "
                    f"state {states[i].tolist()})")
            warnings.warn(f"{which} outside invariant set by {ex[i]:.3g}; clamping",
                          RuntimeWarning, stacklevel=3)
            lo, hi = model.invariant_box
            states[bad] = np.clip(states[bad], lo, hi)
        return ex

    while ids.size:
        if cfg.feedback_each_step:
            u, v = pol.control(gam, x, j, k)
            if shadow is not None:
                w, ms = shadow.select(gam, x, y, u, v, t=t)
                min_sel = np.maximum(min_sel, ms)
        limit = np.minimum(cell_end, H)
        gap_to = limit - t
        reach = gap_to <= dt * (1.0 + _SNAP)
        h = np.where(reach, gap_to, dt)

        x1, xm = _rk4(model, gam, x, u, v, h)
        dL, lam0 = _hazard(model, gam, x, xm, x1, u, h)
        cross = Lam + dL >= E
        if np.any(cross):
            c = np.nonzero(cross)[0]
            if model.restricted:
                tau = np.where(lam0[c] > 0, (E[c] - Lam[c]) / np.where(lam0[c] > 0, lam0[c], 1.0),
                               0.0)
                tau = np.clip(tau, 0.0, h[c])
            else:
                lo = np.zeros(c.size)
                hi = h[c].copy()
                gc, xc, uc, vc, Lc, Ec = gam[c], x[c], u[c], v[c], Lam[c], E[c]
                while np.max(hi - lo) > opts.bisect_tol:
                    mid = 0.5 * (lo + hi)
                    xa, xb = _rk4(model, gc, xc, uc, vc, mid)
                    d, _ = _hazard(model, gc, xc, xb, xa, uc, mid)
                    ok = Lc + d >= Ec
                    hi = np.where(ok, mid, hi)
                    lo = np.where(ok, lo, mid)
                tau = hi
            h[c] = tau
            reach[c] = False
            xa, xb = _rk4(model, gam[c], x[c], u[c], v[c], tau)
            x1[c] = xa
            xm[c] = xb
        if not np.all(np.isfinite(x1)):
            i = int(np.nonzero(~np.all(np.isfinite(x1), axis=1))[0][0])
            raise IntegrationError(f"non-finite state after t={t[i]:.6g} from {x[i].tolist()}")

        # quadrature on [t, t + h]
        q_end, q_mid = simpson_weights(h)
        c0 = model.cost(gam, x, u, v)
        cm = model.cost(gam, xm, u, v)
        c1 = model.cost(gam, x1, u, v)
        integ += q_end * (c0 + c1) + q_mid * cm
        if delta is not None:
            e0 = np.exp(-delta * t)
            em = np.exp(-delta * (t + 0.5 * h))
            e1 = np.exp(-delta * (t + h))
            w0, wm, w1 = delta * q_end * e0, delta * q_mid * em, delta * q_end * e1
            abel += w0 * c0 + wm * cm + w1 * c1
            if atoms is not None:
                scale = 1.0 / cfg.n_total
                atoms.add(ids, gam, t, x, u, v, w0 * scale)
                atoms.add(ids, gam, t + 0.5 * h, xm, u, v, wm * scale)
                atoms.add(ids, gam, t + h, x1, u, v, w1 * scale)

        if shadow is not None:
            y1, ym = _rk4(model, gam, y, u, w, h)
            g0 = np.abs(c0 - model.cost(gam, y, u, w))
            gm = np.abs(cm - model.cost(gam, ym, u, w))
            g1 = np.abs(c1 - model.cost(gam, y1, u, w))
            if delta is not None:
                gap += w0 * g0 + wm * gm + w1 * g1
                if atoms_y is not None:
                    atoms_y.add(ids, gam, t, y, u, w, w0 * scale)
                    atoms_y.add(ids, gam, t + 0.5 * h, ym, u, w, wm * scale)
                    atoms_y.add(ids, gam, t + h, y1, u, w, w1 * scale)

        if rec is not None:
            rec.append((ids.copy(), gam.copy(), t.copy(), h.copy(), x.copy(), xm.copy(),
                        x1.copy(), u.copy(), v.copy()) + (
                (y.copy(), ym.copy(), y1.copy(), w.copy()) if shadow is not None else ()))

        t = np.where(reach, limit, t + h)
        x = x1
        Lam = np.where(cross, 0.0, Lam + dL)
        excess = np.maximum(excess, guard(x, "state", None, t))
        if shadow is not None:
            y = y1
            yexcess = np.maximum(yexcess, guard(y, "coupled state", None, t))
            dsq = np.sum((x - y) ** 2, axis=1)
            supgap = np.maximum(supgap, np.sqrt(dsq))
            denom = t + k * (4.0 * k0 + 1.0)
            cfit = np.maximum(cfit, np.where(denom > 0, (dsq - d0sq) * nref / np.where(
                denom > 0, denom, 1.0), 0.0))

        refresh = np.zeros(ids.size, dtype=bool)
        if np.any(cross):
            c = np.nonzero(cross)[0]
            th = _pick_mode(model.kernel(gam[c], u[c]), unif.take(ids[c]))
            xj = x[c] + model.jump(gam[c], th, x[c], u[c], v[c])
            if shadow is not None:
                y[c] = y[c] + model.jump(gam[c], th, y[c], u[c], w[c])
            x[c] = xj
            gam[c] = th
            k[c] += 1
            T_last[c] = t[c]
            E[c] = -np.log1p(-unif.take(ids[c]))
            j[c] = 0
            cell_end[c] = t[c] + width
            gam_last[c] = th
            y_last[c] = xj
            refresh[c] = True
            excess[c] = np.maximum(excess[c], guard(x[c], "post-jump state", c, t[c]))
            if shadow is not None:
                yexcess[c] = np.maximum(yexcess[c], guard(y[c], "post-jump coupled state", c,
                                                          t[c]))
            if rec is not None:
                for r, i in enumerate(c):
                    jumps_log[ids[i]].append((float(t[i]), int(th[r]), xj[r].copy(),
                                             None if shadow is None else y[i].copy()))
        if nbp:
            bp = (~cross) & reach & (cell_end <= H) & (t >= cell_end)
            if np.any(bp):
                b = np.nonzero(bp)[0]
                j[b] += 1
                cell_end[b] = T_last[b] + (j[b] + 1) * width
                refresh[b] = True
        if np.any(refresh) and not cfg.feedback_each_step:
            r = np.nonzero(refresh)[0]
            ysrc = x[r] if pol.feedback else y_last[r]
            ur, vr = pol.control(gam_last[r], ysrc, j[r], k[r])
            u[r] = ur
            v[r] = vr
            if shadow is not None:
                w[r], ms = shadow.select(gam[r], x[r], y[r], u[r], v[r], t=t[r])
                min_sel[r] = np.maximum(min_sel[r], ms)

        done = t >= H
        if np.any(done):
            d = np.nonzero(done)[0]
            o = ids[d]
            # complete the discounted integral by freezing the cost at the horizon
            hT = model.cost(gam[d], x[d], u[d], v[d])
            out_abel[o] = abel[d] + tail * hT
            out_tu[o] = u[d]
            out_tv[o] = v[d]
            out_int[o] = integ[d]
            out_jumps[o] = k[d]
            out_excess[o] = excess[d]
            out_tmode[o] = gam[d]
            out_tstate[o] = x[d]
            if shadow is not None:
                out_gap[o] = gap[d] + tail * np.abs(hT - model.cost(gam[d], y[d], u[d], w[d]))
                out_tw[o] = w[d]
                out_sup[o] = supgap[d]
                out_cfit[o] = cfit[d]
                out_yexcess[o] = yexcess[d]
                out_ytstate[o] = y[d]
                out_min_sel[o] = min_sel[d]
            keep = ~done
            ids, t, gam, x, T_last, k, j = ids[keep], t[keep], gam[keep], x[keep], T_last[keep], \
                k[keep], j[keep]
            cell_end, Lam, E, gam_last, y_last = cell_end[keep], Lam[keep], E[keep], \
                gam_last[keep], y_last[keep]
            u, v, abel, integ, excess = u[keep], v[keep], abel[keep], integ[keep], excess[keep]
            if shadow is not None:
                y, w, gap, supgap, cfit, yexcess, d0sq, min_sel = (
                    y[keep], w[keep], gap[keep], supgap[keep], cfit[keep], yexcess[keep],
                    d0sq[keep], min_sel[keep])

    res = {"abel": out_abel, "integral": out_int, "n_jumps": out_jumps,
           "max_excess": out_excess, "terminal_mode": out_tmode, "terminal_state": out_tstate,
           "terminal_u": out_tu, "terminal_v": out_tv}
    if atoms is not None:
        res["atoms"] = atoms.finish(start)
    if shadow is not None:
        res.update(gap=out_gap, sup_gap=out_sup, c_fit=out_cfit, y_excess=out_yexcess,
                   y_terminal_state=out_ytstate, y_terminal_w=out_tw,
                   selection_defect=out_min_sel)
        if atoms_y is not None:
            res["atoms_y"] = atoms_y.finish(start)
    if rec is not None:
        res["trajectories"] = _assemble(rec, jumps_log, n, H, cfg.seed, start, model, False)
        if shadow is not None:
            res["trajectories_y"] = _assemble(rec, jumps_log, n, H, cfg.seed, start, model,
                                              True)
    return res


def _assemble(rec, jumps_log, n, H, seed, start, model, shadow) -> list[Trajectory]:
    cols = [np.concatenate(z) for z in zip(*rec)]
    rows, gam, t, h, x, xm, x1, u, v = cols[:9]
    if shadow:
        x, xm, x1, v = cols[9:]
    slot = 3 if shadow else 2
    order = np.lexsort((t, rows))
    rows, gam, t, h, x, xm, x1, u, v = (a[order] for a in (rows, gam, t, h, x, xm, x1, u, v))
    out = []
    for p in range(n):
        sel = rows == p
        tp, hp, gp = t[sel], h[sel], gam[sel]
        xp, xmp, x1p, up, vp = x[sel], xm[sel], x1[sel], u[sel], v[sel]
        log = jumps_log[p]
        times = [e[0] for e in log]
        segs = []
        bounds = times[1:] + [H]
        for s, (t0, t1) in enumerate(zip(times, bounds)):
            last = s == len(times) - 1
            m = (tp >= t0) & ((tp < t1) if not last else (tp <= t1))
            m &= hp > 0
            idx = np.nonzero(m)[0]
            mode = log[s][1]
            if idx.size:
                tt = np.concatenate([tp[idx], [tp[idx[-1]] + hp[idx[-1]]]])
                xx = np.concatenate([xp[idx], x1p[idx[-1:]]])
                segs.append(Segment(mode, tt, xx, xmp[idx], up[idx], vp[idx]))
            else:
                segs.append(Segment(mode, np.array([t0]), log[s][slot][None, :],
                                    np.empty((0, model.dim)), np.empty((0, model.du)),
                                    np.empty((0, model.dv))))
        out.append(Trajectory(times, [e[1] for e in log], [e[slot] for e in log], segs, H, seed,
                              start + p))
    return out


def _expected_steps(model: Model, H: float, dt: float, nbp: int | None) -> float:
    return math.ceil(H / dt) + (nbp * H if nbp else 0.0) + 3.0 * model.bounds.lambda_max * H + 10


def simulate_ensemble(model: Model, gamma0, x0, policy: Policy, horizon: float, n_paths: int,
                      seed: int, *, delta: float | None = None, options: SimOptions | None = None,
                      record: bool = False, atoms: bool = False, max_atoms: int = 10**6,
                      shadow=None, y0=None, first_stream: int = 0, threads: int = 1,
                      chunk: int | None = None) -> EnsembleResult:
    """Simulate ``n_paths`` independent paths up to ``horizon``.

    Path ``i`` uses the random stream ``RngStream(seed, first_stream + i)``.
    ``gamma0``/``x0`` may be per-path arrays. With ``delta`` set, the
    discounted cost ``delta * int_0^H e^{-delta t} h dt`` is accumulated per
    path (composite Simpson on the integrator steps) and completed with
    ``e^{-delta H} h(Z_H)`` for the tail; then ``atoms=True``
    also collects the discounted occupation atoms (thinned by time strata
    when the expected count exceeds ``max_atoms``).

    ``shadow`` drives a second state process on the same jump skeleton (see
    :mod:`pdmpctl.coupling`).
    """
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if delta is not None and delta <= 0:
        raise ValueError("delta must be > 0")
    opts = options or SimOptions()
    N = model.dim
    x0 = np.asarray(x0, dtype=float)
    x0 = np.broadcast_to(x0.reshape(-1, N) if x0.ndim > 1 else x0.reshape(1, N),
                         (n_paths, N)).copy()
    g0 = np.broadcast_to(np.asarray(
        [model.mode_index(g) for g in np.atleast_1d(gamma0)] if np.ndim(gamma0) else
        [model.mode_index(gamma0)], dtype=np.int64), (n_paths,)).copy()
    if not np.all(model.in_box(x0, opts.invariance_tol)):
        raise InvarianceError("initial state outside the invariant set")
    if shadow is not None:
        if not model.restricted:
            raise ModelError("coupled simulation requires rates and kernels free of x and v")
        y0 = np.broadcast_to(np.asarray(y0, float).reshape(-1, N), (n_paths, N)).copy()
        if not np.all(model.in_box(y0, opts.invariance_tol)):
            raise InvarianceError("coupled initial state outside the invariant set")
    nbp = policy.n
    if shadow is not None:
        if nbp is not None and nbp != shadow.n:
            raise ValueError(f"policy step n={nbp} differs from coupling n={shadow.n}")
        nbp = shadow.n
    strata: int | None = 0
    if atoms:
        if delta is None:
            raise ValueError("occupation atoms need a discount delta")
        est = 3 * _expected_steps(model, horizon, opts.dt, nbp) * n_paths
        strata = None if est <= max_atoms else max(1, max_atoms // (3 * n_paths) * 3)
    cfg = _Config(model, policy, float(horizon), int(seed), opts, delta, n_paths, record,
                  strata, shadow, nbp, bool(policy.feedback and policy.n is None))

    if chunk is None:
        chunk = max(1, math.ceil(n_paths / max(1, threads)))
    starts = list(range(0, n_paths, chunk))

    def job(s):
        e = min(n_paths, s + chunk)
        return _run_batch(cfg, g0[s:e], x0[s:e], None if y0 is None else y0[s:e],
                          first_stream + s)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, starts))
    else:
        parts = [job(s) for s in starts]

    cat = lambda key: np.concatenate([p[key] for p in parts])
    res = EnsembleResult(
        n_paths=n_paths, horizon=float(horizon), delta=delta,
        abel=cat("abel"), integral=cat("integral"), n_jumps=cat("n_jumps"),
        max_excess=cat("max_excess"), terminal_mode=cat("terminal_mode"),
        terminal_state=cat("terminal_state"),
    )
    res.extra["terminal_u"] = cat("terminal_u")
    res.extra["terminal_v"] = cat("terminal_v")
    if record:
        res.trajectories = [tr for p in parts for tr in p["trajectories"]]
        if shadow is not None:
            res.extra["trajectories_y"] = [tr for p in parts for tr in p["trajectories_y"]]
    if atoms:
        res.atoms = _merge_atoms([p.get("atoms", {}) for p in parts])
        if res.atoms is not None:
            res.atoms["path"] -= first_stream
        res.extra["strata"] = strata
    if shadow is not None:
        res.shadow = {key: cat(key) for key in ("gap", "sup_gap", "c_fit", "y_excess",
                                                "y_terminal_state", "y_terminal_w",
                                                "selection_defect")}
        if atoms:
            res.shadow["atoms"] = _merge_atoms([p.get("atoms_y", {}) for p in parts])
            if res.shadow["atoms"] is not None:
                res.shadow["atoms"]["path"] -= first_stream
    res.extra["gamma0"] = g0
    res.extra["x0"] = x0
    if y0 is not None:
        res.extra["y0"] = y0
    return res


def simulate_trajectory(model: Model, gamma0, x0, policy: Policy, horizon: float,
                        rng: RngStream, options: SimOptions | None = None) -> Trajectory:
    """One path, bit-identical to path ``rng.stream_index`` of an ensemble with the same seed."""
    res = simulate_ensemble(model, gamma0, x0, policy, horizon, 1, rng.seed, options=options,
                            record=True, first_stream=rng.stream_index)
    return res.trajectories[0]


def constant_policy(model: Model, u=None, v=None) -> Constant:
    u = model.u_box[0] if u is None else u
    v = model.v_box[0] if v is None else v
    return Constant(u, v)
