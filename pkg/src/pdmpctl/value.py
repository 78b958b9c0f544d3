"""Monte-Carlo estimates of discounted (Abel) and time-average (Cesàro) values."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import Model
from .policy import FamilySpec, Policy, enumerate_policy_family
from .simulate import SimOptions, simulate_ensemble

__all__ = [
    "ValueEstimate",
    "estimate_abel",
    "estimate_cesaro",
    "abel_horizon",
    "optimize_value",
    "tauberian_experiment",
    "TauberianRow",
    "write_estimates_csv",
]


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    stderr: float
    n_paths: int
    truncation_horizon: float
    truncation_bias_bound: float

    @classmethod
    def from_samples(cls, samples: np.ndarray, horizon: float, bias: float) -> "ValueEstimate":
        n = samples.size
        se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(samples.mean()), se, n, float(horizon), float(bias))


def abel_horizon(model: Model, delta: float, bias: float = 1e-4) -> float:
    """Smallest horizon whose discounted tail is below ``bias``."""
    h_max = model.bounds.h_max
    if h_max <= bias:
        return 1.0 / delta
    return math.log(h_max / bias) / delta


def estimate_abel(model: Model, policy: Policy, gamma0, x0, delta: float, n_paths: int,
                  horizon_cap: float | None = None, seed: int = 0, *, bias: float = 1e-4,
                  max_horizon: float = 1e4, options: SimOptions | None = None,
                  threads: int = 1) -> ValueEstimate:
    """``delta E int_0^cap e^{-delta t} h dt`` averaged over paths.

    Without ``horizon_cap`` the cap is chosen so the tail ``h_max e^{-delta cap}``
    is below ``bias``.
    """
    if not delta > 0:
        raise ValueError("delta must be > 0")
    cap = abel_horizon(model, delta, bias) if horizon_cap is None else float(horizon_cap)
    if cap > max_horizon:
        raise ValueError(f"bias {bias:g} needs horizon {cap:.4g} > limit {max_horizon:g}; "
                         f"raise the limit or pass horizon_cap")
    res = simulate_ensemble(model, gamma0, x0, policy, cap, n_paths, seed, delta=delta,
                            options=options, threads=threads)
    return ValueEstimate.from_samples(res.abel, cap, model.bounds.h_max * math.exp(-delta * cap))


def estimate_cesaro(model: Model, policy: Policy, gamma0, x0, T: float, n_paths: int,
                    seed: int = 0, *, options: SimOptions | None = None,
                    threads: int = 1) -> ValueEstimate:
    """``(1/T) E int_0^T h dt`` averaged over paths."""
    if not T > 0:
        raise ValueError("T must be > 0")
    res = simulate_ensemble(model, gamma0, x0, policy, T, n_paths, seed, options=options,
                            threads=threads)
    return ValueEstimate.from_samples(res.integral / T, T, 0.0)


def optimize_value(model: Model, family: FamilySpec, gamma0, x0, objective: tuple[str, float],
                   n_paths: int, seed: int = 0, *, options: SimOptions | None = None,
                   threads: int = 1, bias: float = 1e-4):
    """Best member of a finite policy family.

    Every member is evaluated on the same random streams. ``objective`` is
    ``("abel", delta)`` or ``("cesaro", T)``. Returns ``(policy, estimate,
    table)`` with ``table`` a list of ``(label, estimate)`` in enumeration
    order; ties go to the earliest member.
    """
    kind, par = objective
    if kind not in ("abel", "cesaro"):
        raise ValueError(f"unknown objective {kind!r}")
    best = None
    table = []
    for pol in enumerate_policy_family(family, model):
        if kind == "abel":
            est = estimate_abel(model, pol, gamma0, x0, par, n_paths, seed=seed, bias=bias,
                                options=options, threads=threads)
        else:
            est = estimate_cesaro(model, pol, gamma0, x0, par, n_paths, seed=seed,
                                  options=options, threads=threads)
        table.append((pol.label, est))
        if best is None or est.mean < best[1].mean:
            best = (pol, est)
    return best[0], best[1], table


@dataclass(frozen=True)
class TauberianRow:
    delta: float
    T: float
    probe: int
    mode: int
    x: tuple[float, ...]
    abel: ValueEstimate
    cesaro: ValueEstimate
    abel_policy: str
    cesaro_policy: str

    @property
    def diff(self) -> float:
        return abs(self.abel.mean - self.cesaro.mean)

    @property
    def diff_stderr(self) -> float:
        return math.hypot(self.abel.stderr, self.cesaro.stderr)


def tauberian_experiment(model: Model, family: FamilySpec, probes, delta_grid, n_paths: int,
                         seed: int = 0, *, options: SimOptions | None = None, threads: int = 1,
                         bias: float = 1e-4):
    """Optimized Abel and Cesàro values with ``T = 1/delta`` at each probe.

    Returns ``(rows, summary)`` where ``summary`` lists ``(delta, d, d_stderr)``
    with ``d`` the largest probe-wise gap. Cesàro runs use ``seed + 1`` so the
    two estimates are independent.
    """
    deltas = [float(d) for d in delta_grid]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta_grid must be strictly decreasing")
    rows: list[TauberianRow] = []
    summary = []
    for d in deltas:
        T = 1.0 / d
        worst = None
        for i, (g, x) in enumerate(probes):
            pa, ea, _ = optimize_value(model, family, g, x, ("abel", d), n_paths, seed,
                                       options=options, threads=threads, bias=bias)
            pc, ec, _ = optimize_value(model, family, g, x, ("cesaro", T), n_paths,
                                       seed + 1, options=options, threads=threads)
            row = TauberianRow(d, T, i, model.mode_index(g), tuple(np.atleast_1d(x).tolist()),
                               ea, ec, pa.label, pc.label)
            rows.append(row)
            if worst is None or row.diff > worst.diff:
                worst = row
        summary.append((d, worst.diff, worst.diff_stderr))
    return rows, summary


def write_estimates_csv(path, rows, dim: int) -> None:
    """Rows of ``(key, mode, x, ValueEstimate, policy_label)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "probe_mode", *[f"x{i + 1}" for i in range(dim)], "mean", "stderr",
                    "bias_bound", "best_policy_id"])
        for key, mode, x, est, label in rows:
            w.writerow([_fmt(key), mode, *[_fmt(c) for c in x], _fmt(est.mean),
                        _fmt(est.stderr), _fmt(est.truncation_bias_bound), label])


def _fmt(v) -> str:
    return repr(float(v))
