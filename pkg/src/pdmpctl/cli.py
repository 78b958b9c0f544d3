"""``pdmpctl run --config <path>``: run one experiment and write its artifacts.

Exit codes: 0 all assertions pass, 1 an assertion failed, 2 the config is
malformed, 3 a runtime error occurred.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .coupling import (check_nonexpansive_condition, coupled_ensemble, coupling_gap,
                       default_v_grid, write_pairs_csv)
from .model import PhageParams, phage_lambda_model, toy_model, validate_model
from .occupation import (battery, empirical_occupation, generator_residual,
                         write_residuals_csv)
from .policy import (Constant, FamilySpec, SteppedOpenLoop, policy_from_json)
from .simulate import SimOptions, simulate_ensemble
from .solver import (contraction_bound, hjb_residual, solve_discounted,
                     step_convergence_study)
from .value import (abel_horizon, estimate_abel, estimate_cesaro, optimize_value,
                    tauberian_experiment, write_estimates_csv)

log = logging.getLogger("pdmpctl")

EXPERIMENTS = ("abel", "cesaro", "tauberian", "solve", "step_study", "coupling",
               "nonexp_check", "occupation", "validate")
TOYS = ("constant_cost", "decay_1d", "flipflop", "controlled_decay", "expansive", "drift_v")
GRID_TOL = 1e-3  # grid plus quadrature tolerance of the solver


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

class _V:
    """Tiny path-aware validator for nested JSON blocks."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected an object")
        self.d = data
        self.path = path

    def _get(self, key, default, required):
        if key not in self.d:
            if required:
                raise ConfigError(f"{self.path}.{key}: missing required field")
            return default
        return self.d[key]

    def num(self, key, default=None, *, required=False, positive=False, integer=False):
        val = self._get(key, default, required)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{self.path}.{key}: expected a number, got {val!r}")
        if integer and int(val) != val:
            raise ConfigError(f"{self.path}.{key}: expected an integer, got {val!r}")
        if positive and not val > 0:
            raise ConfigError(f"{self.path}.{key}: must be > 0, got {val!r}")
        return int(val) if integer else float(val)

    def nums(self, key, default=None, *, required=False, positive=False, integer=False):
        val = self._get(key, default, required)
        if val is None:
            return None
        if not isinstance(val, list) or not val:
            raise ConfigError(f"{self.path}.{key}: expected a nonempty list")
        out = []
        for i, x in enumerate(val):
            sub = _V({"v": x}, f"{self.path}.{key}[{i}]")
            out.append(sub.num("v", required=True, positive=positive, integer=integer))
        return out

    def str(self, key, default=None, *, required=False, choices=None):
        val = self._get(key, default, required)
        if val is None:
            return None
        if not isinstance(val, str):
            raise ConfigError(f"{self.path}.{key}: expected a string")
        if choices and val not in choices:
            raise ConfigError(f"{self.path}.{key}: {val!r} not one of {sorted(choices)}")
        return val

    def obj(self, key, *, required=False) -> "_V":
        val = self._get(key, {}, required)
        return _V(val, f"{self.path}.{key}")


def _probes(v: _V, model, key="probes", required=True):
    raw = v.d.get(key)
    if raw is None:
        if required:
            raise ConfigError(f"{v.path}.{key}: missing required field")
        return None
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{v.path}.{key}: expected a nonempty list")
    out = []
    for i, p in enumerate(raw):
        pv = _V(p, f"{v.path}.{key}[{i}]")
        mode = pv.d.get("mode", 0)
        try:
            g = model.mode_index(mode)
        except ValueError as e:
            raise ConfigError(f"{pv.path}.mode: {e}") from None
        x = pv.nums("x", required=True)
        if len(x) != model.dim:
            raise ConfigError(f"{pv.path}.x: expected {model.dim} coordinates")
        out.append((g, np.array(x)))
    return out


def build_model(cfg: dict):
    if "model" not in cfg:
        raise ConfigError("model: missing required block")
    mv = _V(cfg["model"], "model")
    name = mv.str("name", required=True, choices=("phage",) + TOYS)
    params = mv.d.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ConfigError("model.params: expected an object")
    params = dict(params)
    try:
        if name == "phage":
            cost = params.pop("cost", "x1")
            if cost not in ("x1", "x2"):
                raise ConfigError("model.params.cost: must be 'x1' or 'x2'")
            unknown = set(params) - set(PhageParams.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"model.params: unknown fields {sorted(unknown)}")
            return phage_lambda_model(PhageParams(**params), cost=cost)
        return toy_model(name, **params)
    except TypeError as e:
        raise ConfigError(f"model.params: {e}") from None
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"model.params: {e}") from None


def build_policy(cfg: dict, model):
    raw = cfg.get("policy", {"kind": "constant"})
    pv = _V(raw, "policy")
    kind = pv.str("kind", "constant", choices=("constant", "random_stepped", "table"))
    if kind == "constant":
        u = pv.nums("u", list(model.u_box[1]))
        v = pv.nums("v", list(model.v_box[1]))
        return Constant(u, v)
    if kind == "random_stepped":
        return SteppedOpenLoop.random(model, pv.num("n", 4, integer=True, positive=True),
                                      pv.num("n_steps", 8, integer=True, positive=True),
                                      pv.num("seed", 0, integer=True),
                                      cells=pv.num("cells", 4, integer=True, positive=True))
    path = pv.str("path", required=True)
    try:
        return policy_from_json(Path(path).read_text())
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"policy.path: cannot load policy table ({e})") from None


def build_family(v: _V):
    fv = v.obj("family")
    return FamilySpec(kind=fv.str("kind", "constant", choices=("constant", "stepped")),
                      u_levels=tuple(fv.nums("u_levels", [0.0, 1.0])),
                      v_levels=tuple(fv.nums("v_levels", [0.0, 1.0])),
                      n=fv.num("n", 1, integer=True, positive=True),
                      n_steps=fv.num("n_steps", 1, integer=True, positive=True),
                      cap=fv.num("cap", 10**6, integer=True, positive=True))


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("top level: expected an object")
    top = _V(cfg, "config")
    top.str("experiment", required=True, choices=EXPERIMENTS)
    if "seed" not in cfg:
        raise ConfigError("config.seed: missing required field")
    top.num("seed", required=True, integer=True)
    override = os.environ.get("PDMP_SEED_OVERRIDE")
    if override is not None:
        try:
            cfg["seed"] = int(override)
        except ValueError:
            raise ConfigError(f"PDMP_SEED_OVERRIDE: not an integer: {override!r}") from None
    return cfg


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: dict, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.checks: list[tuple[str, bool, str]] = []
        self.files: list[str] = []
        self.model = build_model(cfg)
        sim = _V(cfg.get("simulation", {}), "simulation")
        self.options = SimOptions(dt=sim.num("dt", 1e-2, positive=True))
        self.n_paths = sim.num("n_paths", 10**4, integer=True, positive=True)
        self.seed = int(cfg["seed"])
        self.block = _V(cfg.get(cfg["experiment"], {}), cfg["experiment"])

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, bool(ok), detail))

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name


def _fmt(x) -> str:
    return repr(float(x))


def run_abel(r: Run):
    b, m = r.block, r.model
    deltas = b.nums("deltas", required=True, positive=True)
    probes = _probes(b, m)
    bias = b.num("bias", 1e-4, positive=True)
    use_family = "family" in b.d
    policy = None if use_family else build_policy(r.cfg, m)
    rows = []
    for d in deltas:
        for g, x in probes:
            if use_family:
                pol, est, _ = optimize_value(m, build_family(b), g, x, ("abel", d), r.n_paths,
                                             r.seed, options=r.options, threads=r.threads,
                                             bias=bias)
                label = pol.label
            else:
                est = estimate_abel(m, policy, g, x, d, r.n_paths, seed=r.seed, bias=bias,
                                    options=r.options, threads=r.threads)
                label = policy.label
            rows.append((d, g, x, est, label))
            r.check(f"bounded delta={d:g} x={x.tolist()}",
                    abs(est.mean) <= m.bounds.h_max + 3 * est.stderr, f"{est.mean:.6g}")
    write_estimates_csv(r.path("abel.csv"), rows, m.dim)


def run_cesaro(r: Run):
    b, m = r.block, r.model
    Ts = b.nums("T", required=True, positive=True)
    probes = _probes(b, m)
    use_family = "family" in b.d
    policy = None if use_family else build_policy(r.cfg, m)
    rows = []
    for T in Ts:
        for g, x in probes:
            if use_family:
                pol, est, _ = optimize_value(m, build_family(b), g, x, ("cesaro", T),
                                             r.n_paths, r.seed, options=r.options,
                                             threads=r.threads)
                label = pol.label
            else:
                est = estimate_cesaro(m, policy, g, x, T, r.n_paths, seed=r.seed,
                                      options=r.options, threads=r.threads)
                label = policy.label
            rows.append((T, g, x, est, label))
            r.check(f"bounded T={T:g} x={x.tolist()}",
                    abs(est.mean) <= m.bounds.h_max + 3 * est.stderr, f"{est.mean:.6g}")
    write_estimates_csv(r.path("cesaro.csv"), rows, m.dim)


def run_tauberian(r: Run):
    b, m = r.block, r.model
    deltas = b.nums("deltas", [0.5, 0.2, 0.1, 0.05], positive=True)
    probes = _probes(b, m)
    rows, summary = tauberian_experiment(m, build_family(b), probes, deltas, r.n_paths, r.seed,
                                         options=r.options, threads=r.threads,
                                         bias=b.num("bias", 1e-4, positive=True))
    with open(r.path("tauberian_probes.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "T", "probe_mode", *[f"x{i + 1}" for i in range(m.dim)],
                    "abel_mean", "abel_stderr", "abel_bias_bound", "abel_policy",
                    "cesaro_mean", "cesaro_stderr", "cesaro_policy"])
        for row in rows:
            w.writerow([_fmt(row.delta), _fmt(row.T), row.mode, *map(_fmt, row.x),
                        _fmt(row.abel.mean), _fmt(row.abel.stderr),
                        _fmt(row.abel.truncation_bias_bound), row.abel_policy,
                        _fmt(row.cesaro.mean), _fmt(row.cesaro.stderr), row.cesaro_policy])
    with open(r.path("tauberian.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "T", "d", "d_stderr"])
        for d, gap, se in summary:
            w.writerow([_fmt(d), _fmt(1.0 / d), _fmt(gap), _fmt(se)])
    ok, detail = tauberian_trend(summary)
    r.check("d(delta) nonincreasing within 2 stderr, last <= first", ok, detail)


def tauberian_trend(summary) -> tuple[bool, str]:
    ok = True
    for (d0, g0, s0), (d1, g1, s1) in zip(summary, summary[1:]):
        if g1 > g0 + 2.0 * math.hypot(s0, s1):
            ok = False
    ok = ok and summary[-1][1] <= summary[0][1]
    return ok, "; ".join(f"d({d:g})={g:.4g}±{s:.2g}" for d, g, s in summary)


def _controls(b: _V, model):
    from .model import control_grid
    return control_grid(model, b.num("levels", 5, integer=True, positive=True))


def run_solve(r: Run):
    b, m = r.block, r.model
    delta = b.num("delta", required=True, positive=True)
    n = b.num("n", 4, integer=True, positive=True)
    counts = b.num("counts", 64, integer=True, positive=True)
    tol = b.num("tol", 1e-7, positive=True)
    table, hist = solve_discounted(m, delta, n, _controls(b, m), counts, tol)
    table.write(r.path("value_table.csv"), r.path("value_table.json"))
    alpha = contraction_bound(m, delta)
    with open(r.path("iterations.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sup_change", "ratio"])
        for h in hist:
            w.writerow([h["iteration"], _fmt(h["sup_change"]), _fmt(h["ratio"])])
    ratios = [h["ratio"] for h in hist[1:] if h["sup_change"] > 1e3 * np.finfo(float).eps]
    worst = max(ratios, default=0.0)
    r.check("contraction ratio <= lambda_max/(delta+lambda_max)+0.02", worst <= alpha + 0.02,
            f"max ratio {worst:.4f}, bound {alpha + 0.02:.4f}")
    slope = table.neighbor_slope()
    r.check("discrete Lipschitz <= 1.1 Lip(h)", slope <= 1.1 * m.bounds.lip_h + 1e-12,
            f"{slope:.5g} vs {1.1 * m.bounds.lip_h:.5g}")
    res = hjb_residual(m, table)
    nodes = table.nodes()
    with open(r.path("hjb_residual.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", *[f"x{i + 1}" for i in range(m.dim)], "residual"])
        for g in range(res.shape[0]):
            for k in np.nonzero(np.isfinite(res[g]))[0]:
                w.writerow([g, *map(_fmt, nodes[k]), _fmt(res[g, k])])
    with open(r.path("greedy_policy.json"), "w") as fh:
        fh.write(table.greedy_policy().to_json())
    probes = _probes(b, m, required=False)
    if probes:
        pol = table.greedy_policy()
        with open(r.path("cross_validation.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe_mode", *[f"x{i + 1}" for i in range(m.dim)], "table_value",
                        "mc_mean", "mc_stderr"])
            for g, x in probes:
                est = estimate_abel(m, pol, g, x, delta, r.n_paths, seed=r.seed,
                                    options=r.options, threads=r.threads)
                tv = table.value(g, x)
                w.writerow([g, *map(_fmt, x), _fmt(tv), _fmt(est.mean), _fmt(est.stderr)])
                r.check(f"MC agrees with table at {x.tolist()}",
                        abs(est.mean - tv) <= 3 * est.stderr + 2e-2,
                        f"table {tv:.5f} mc {est.mean:.5f}±{est.stderr:.2g}")


def run_step_study(r: Run):
    b, m = r.block, r.model
    delta = b.num("delta", required=True, positive=True)
    n_list = b.nums("n_list", [4, 16, 64, 256], integer=True, positive=True)
    rows, _ = step_convergence_study(m, delta, n_list, b.num("counts", 32, integer=True,
                                                              positive=True),
                                     _controls(b, m), b.num("tol", 1e-7, positive=True))
    with open(r.path("step_study.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "sup_diff_vs_finest"])
        for n, d in rows:
            w.writerow([n, _fmt(d)])
    ok, detail = step_trend(rows)
    r.check("sup-differences nonincreasing in n within 2 grid tolerances", ok, detail)


def step_trend(rows, tol: float = GRID_TOL) -> tuple[bool, str]:
    diffs = [d for _, d in rows[:-1]]
    ok = all(b <= a + 2 * tol for a, b in zip(diffs, diffs[1:]))
    return ok, ", ".join(f"n={n}: {d:.3g}" for n, d in rows)


def run_coupling(r: Run):
    b, m = r.block, r.model
    delta = b.num("delta", 0.5, positive=True)
    n_list = b.nums("n_list", [4, 16, 64, 256], integer=True, positive=True)
    g = m.mode_index(b.d.get("mode", 0))
    x0 = np.array(b.nums("x0", required=True))
    y0 = np.array(b.nums("y0", required=True))
    base = build_policy(r.cfg, m)
    blocks, eps = [], []
    d0 = float(np.linalg.norm(x0 - y0))
    for n in n_list:
        pol = base
        if isinstance(base, SteppedOpenLoop):
            if n % base.n:
                raise ConfigError(f"coupling.n_list: {n} is not a multiple of policy n={base.n}")
            pol = base.refine(n // base.n) if n != base.n else base
        res = coupled_ensemble(m, g, x0, y0, pol, n, r.n_paths, r.seed, delta=delta,
                               options=r.options, threads=r.threads)
        gap, se = coupling_gap(res)
        blocks.append((n, res))
        eps.append((n, gap - m.bounds.lip_h * d0, se))
        r.check(f"n={n}: selection defect <= 1e-9",
                float(res.shadow["selection_defect"].max()) <= 1e-9)
        if d0 == 0:
            r.check(f"n={n}: zero gap for equal starts",
                    float(np.max(res.shadow["sup_gap"])) == 0.0 and gap == 0.0)
        r.check(f"n={n}: gap <= 2 h_max + 3 stderr", gap <= 2 * m.bounds.h_max + 3 * se)
    write_pairs_csv(r.path("coupling_pairs.csv"), blocks)
    with open(r.path("coupling_gap.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "initial_distance", "gap", "stderr", "epsilon"])
        for (n, e, se), (_, res) in zip(eps, blocks):
            w.writerow([n, _fmt(d0), _fmt(e + m.bounds.lip_h * d0), _fmt(se), _fmt(e)])
    ok = all(e1 <= e0 + 2 * math.hypot(s0, s1) for (_, e0, s0), (_, e1, s1) in zip(eps, eps[1:]))
    r.check("epsilon(n) nonincreasing within 2 stderr", ok,
            ", ".join(f"n={n}: {e:.4g}" for n, e, _ in eps))


def run_nonexp(r: Run):
    b, m = r.block, r.model
    tol = b.num("tol", 1e-9, positive=True)
    rep = check_nonexpansive_condition(
        m, b.num("n_samples", 10**5, integer=True, positive=True),
        default_v_grid(m, b.num("v_points", 33, integer=True, positive=True)), r.seed, tol)
    with open(r.path("nonexp.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "worst_defect", "witness"])
        for name, val in (("flow", rep.worst_flow_gap), ("jump", rep.worst_jump_gap),
                          ("cost", rep.worst_cost_gap)):
            w.writerow([name, _fmt(val), json.dumps(rep.witnesses.get(name), sort_keys=True)])
    r.check("coupling condition holds", rep.passed,
            f"worst flow {rep.worst_flow_gap:.3g}, jump {rep.worst_jump_gap:.3g}, "
            f"cost {rep.worst_cost_gap:.3g}")


def run_occupation(r: Run):
    b, m = r.block, r.model
    delta = b.num("delta", 1.0, positive=True)
    g = m.mode_index(b.d.get("mode", 0))
    x0 = np.array(b.nums("x0", required=True))
    pol = build_policy(r.cfg, m)
    horizon = abel_horizon(m, delta, b.num("bias", 1e-4, positive=True))
    measures = []
    if "y0" in b.d:
        y0 = np.array(b.nums("y0", required=True))
        n = pol.n or b.num("n", 4, integer=True, positive=True)
        res = coupled_ensemble(m, g, x0, y0, pol, n, r.n_paths, r.seed, delta=delta,
                               horizon=horizon, atoms=True, options=r.options,
                               threads=r.threads)
        measures = [("X", empirical_occupation(res, "x")), ("Y", empirical_occupation(res, "y"))]
    else:
        res = simulate_ensemble(m, g, x0, pol, horizon, r.n_paths, r.seed, delta=delta,
                                atoms=True, options=r.options, threads=r.threads)
        measures = [("X", empirical_occupation(res, "x"))]
    rows = []
    for name, occ in measures:
        for f in battery(m):
            res_, se = generator_residual(m, occ, f)
            rows.append((name, f.id, res_, se))
            r.check(f"{name} {f.id}: |residual| <= 3 stderr", abs(res_) <= 3 * se,
                    f"{res_:.3g} vs {se:.3g}")
        r.check(f"{name}: mass + tail = 1", abs(occ.total_weight + occ.tail_mass - 1) <= 1e-9)
    write_residuals_csv(r.path("occupation_residuals.csv"), rows)


def run_validate(r: Run):
    b, m = r.block, r.model
    rep = validate_model(m, b.num("sample_count", 10**4, integer=True, positive=True), r.seed)
    with open(r.path("validation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "empirical", "violations", "witness"])
        for key, emp, nviol, wit in rep.rows():
            w.writerow([key, _fmt(emp), nviol, json.dumps(wit, sort_keys=True)])
    r.check("declared bounds hold", rep.ok,
            "; ".join(k for k, c in sorted(rep.violations.items()) if c))


RUNNERS = {"abel": run_abel, "cesaro": run_cesaro, "tauberian": run_tauberian,
           "solve": run_solve, "step_study": run_step_study, "coupling": run_coupling,
           "nonexp_check": run_nonexp, "occupation": run_occupation, "validate": run_validate}


def run_experiment(config_path: str, output_dir: str | None = None,
                   threads: int | None = None) -> int:
    threads = threads or os.cpu_count() or 1
    try:
        cfg = load_config(config_path)
        out = Path(output_dir or cfg.get("output_dir") or "pdmpctl_out")
        run = Run(cfg, out, threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        RUNNERS[cfg["experiment"]](run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 -- any failure inside an experiment is a runtime error
        traceback.print_exc()
        print(f"runtime error: {e}", file=sys.stderr)
        return 3
    wall = time.time() - t0
    passed = all(ok for _, ok, _ in run.checks)
    with open(out / "summary.txt", "w") as fh:
        for name, ok, detail in run.checks:
            fh.write(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
                     + "\n")
        fh.write(f"overall: {'PASS' if passed else 'FAIL'}\n")
    manifest = {"tool": "pdmpctl", "version": __version__, "config": cfg,
                "threads": threads, "wall_time_s": wall, "files": run.files,
                "passed": passed}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    print((out / "summary.txt").read_text(), end="")
    return 0 if passed else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pdmpctl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    rp = sub.add_parser("run", help="run one experiment from a JSON config")
    rp.add_argument("--config", required=True)
    rp.add_argument("--output-dir")
    rp.add_argument("--threads", type=int)
    rp.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return run_experiment(args.config, args.output_dir, args.threads)


if __name__ == "__main__":
    sys.exit(main())
