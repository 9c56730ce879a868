"""Command-line experiment runner.

    vortex run|pde|meanfield|sweep|bench|balance|martingale|validate --config FILE
           [--set key=value]... [--resume] [--out DIR]

A config file holds ``key = value`` lines (``#`` starts a comment); list values
are comma separated. Every plan writes ``plan.json``, one directory per run
key, ``reports.ndjson`` and ``summary.csv`` (plus ``bench.csv`` for benches).
Exit status: 0 on success, 1 if any run failed, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import shutil
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import (GaussianVortex, SimConfig, VorticityField, lift_vorticity)

log = logging.getLogger("vortexlab")

KINDS = {"run": "interacting_run", "pde": "pde_run", "meanfield": "mean_field_run",
         "sweep": "chaos_sweep", "bench": "nbody_bench", "balance": "balance_check",
         "martingale": "martingale_sweep"}


class ConfigError(ValueError):
    def __init__(self, errors):
        super().__init__("\n".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class Key:
    type: str
    default: object
    check: object = None
    help: str = ""


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _choice(*opts):
    def check(v):
        return v in opts
    check.__doc__ = "one of " + ", ".join(opts)
    return check


SCHEMA = {
    # run configuration
    "n_particles": Key("int", 1000, _positive, "number of vortices N"),
    "sigma": Key("float", math.sqrt(0.2), _nonneg, "noise intensity; nu = sigma^2/2"),
    "moment_order_k": Key("float", 1.0, lambda v: 0 < v <= 1, "moment order k in (0, 1]"),
    "circulation_bound_A": Key("float", 1.0, _positive, "bound on |M_i|"),
    "dt": Key("float", 1e-3, _positive, "time step"),
    "t_end": Key("float", 0.5, _nonneg, "final time"),
    "epsilon": Key("float?", None, lambda v: v is None or v >= 0,
                   "kernel cutoff (0 = exact kernel; default 10 sqrt(dt) sigma)"),
    "seed": Key("int", 0, lambda v: 0 <= v < 2**64, "base seed"),
    "save_times": Key("floats?", None, None, "checkpoint times (default 0, t_end)"),
    # integrator
    "scheme": Key("str", "euler_maruyama", _choice("euler_maruyama", "srk_heun")),
    "drift_backend": Key("str", "direct", _choice("direct", "tree", "none")),
    "theta": Key("float", 0.5, _nonneg),
    "order_p": Key("int", 8, lambda v: 1 <= v <= 40),
    "leaf_capacity": Key("int", 16, _positive),
    "clamp_step": Key("float?", None, lambda v: v is None or v > 0),
    # initial vorticity and PDE grid
    "initial": Key("str", "lamb_oseen", _choice("lamb_oseen", "dipole")),
    "circulation": Key("float", 1.0, lambda v: v != 0),
    "core_variance": Key("float", 1.0, _positive),
    "dipole_offset": Key("float", 2.0, _positive),
    "grid_n": Key("int", 256, lambda v: v >= 8 and v & (v - 1) == 0, "PDE grid side (power of two)"),
    "box_length": Key("float", 40.0, _positive),
    "pde_dt": Key("float?", None, lambda v: v is None or v > 0, "PDE step (default 10 dt)"),
    "kernel_normalization": Key("str", "paper_2pi_free", _choice("paper_2pi_free", "standard")),
    # estimators
    "kde_grid": Key("int", 128, lambda v: v >= 8),
    "pair_grid": Key("int", 24, lambda v: 8 <= v <= 32),
    "gammas": Key("floats", (0.5, 1.0, 1.5), lambda v: all(0 < g < 2 for g in v)),
    # sweep axes
    "sweep_N": Key("ints?", None, lambda v: v is None or (v and all(n >= 2 for n in v))),
    "sweep_seeds": Key("ints?", None, lambda v: v is None or len(v) > 0),
    "sweep_epsilon": Key("floats?", None, lambda v: v is None or (v and all(e >= 0 for e in v))),
    "sweep_dt": Key("floats?", None, lambda v: v is None or (v and all(d > 0 for d in v))),
    "sweep_theta": Key("floats?", None, lambda v: v is None or (v and all(t >= 0 for t in v))),
    # martingale functional: t_1 < .. < t_k < s < t (default t_end/3, 2 t_end/3, t_end)
    "mart_times": Key("floats?", None, None),
    "mart_phi_scale": Key("float", 1.0, _positive),
    "mart_mark_scale": Key("float", 2.0, _positive),
    "output_dir": Key("str", "vortex_out", None),
}

DERIVED = {"nu": "nu is derived as sigma^2/2 and cannot be set"}
_PLAN_ONLY = ("output_dir",)


def _parse_value(kind: str, raw: str):
    raw = raw.strip()
    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if optional and raw.lower() in ("none", ""):
        return None
    if base == "int":
        if not re.fullmatch(r"[+-]?\d+", raw):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(raw)
    if base == "float":
        return float(raw)
    if base == "str":
        return raw
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if base == "ints":
        out = []
        for s in items:
            if not re.fullmatch(r"[+-]?\d+", s) and not re.fullmatch(r"\d+(\.0*)?[eE]\+?\d+", s):
                raise ValueError(f"expected integers, got {s!r}")
            v = float(s) if "e" in s.lower() else int(s)
            if v != int(v):
                raise ValueError(f"expected integers, got {s!r}")
            out.append(int(v))
        return tuple(out)
    if base == "floats":
        return tuple(float(s) for s in items)
    raise AssertionError(kind)


def _assign(values: dict, sources: dict, key: str, raw: str, where: str, errors: list):
    if key in DERIVED:
        errors.append(f"{where}: {DERIVED[key]}")
        return
    if key not in SCHEMA:
        errors.append(f"{where}: unknown key {key!r}")
        return
    spec = SCHEMA[key]
    try:
        v = _parse_value(spec.type, raw)
    except ValueError as e:
        errors.append(f"{where}: {key}: {e}")
        return
    if spec.check is not None and not spec.check(v):
        hint = {"moment_order_k": "allowed range is (0, 1]"}.get(key, spec.help or
                                                                  (spec.check.__doc__ or "constraint violated"))
        errors.append(f"{where}: {key} = {raw.strip()}: {hint}")
        return
    values[key] = v
    sources[key] = where


def validate_config(path, overrides=()) -> tuple[dict, SimConfig]:
    """Parse, type-check and resolve a config; raises :class:`ConfigError` listing every problem."""
    errors: list[str] = []
    values: dict = {}
    sources: dict = {}
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError([f"{path}: cannot read config: {e.strerror}"])
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{path.name}:{no}"
        if "=" not in text:
            errors.append(f"{where}: expected 'key = value', got {text!r}")
            continue
        k, v = text.split("=", 1)
        _assign(values, sources, k.strip(), v, where, errors)
    for o in overrides:
        if "=" not in o:
            errors.append(f"--set {o}: expected key=value")
            continue
        k, v = o.split("=", 1)
        _assign(values, sources, k.strip(), v, f"--set {o}", errors)
    resolved = {k: values.get(k, spec.default) for k, spec in SCHEMA.items()}
    cfg = None
    if not errors:
        try:
            cfg = SimConfig(**{k: resolved[k] for k in ("n_particles", "sigma", "moment_order_k",
                                                         "circulation_bound_A", "dt", "t_end",
                                                         "epsilon", "seed", "save_times")})
        except ValueError as e:
            errors.append(f"{path.name}: {e}")
        if abs(resolved["circulation"]) > resolved["circulation_bound_A"]:
            errors.append(f"{sources.get('circulation', path.name)}: |circulation| exceeds "
                          f"circulation_bound_A = {resolved['circulation_bound_A']}")
        mt = resolved["mart_times"]
        if mt is not None and (len(mt) < 2 or any(b <= a for a, b in zip(mt, mt[1:]))
                               or mt[0] <= 0 or mt[-1] > resolved["t_end"]):
            errors.append(f"{sources.get('mart_times')}: mart_times must increase within (0, t_end]")
    if errors:
        raise ConfigError(errors)
    resolved["epsilon"] = cfg.epsilon
    resolved["save_times"] = cfg.save_times
    resolved["nu"] = cfg.nu
    return resolved, cfg


# -- plan execution -------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    kind: str
    config: dict
    output_dir: Path
    overrides: list = field(default_factory=list)

    def axes(self) -> dict:
        c = self.config
        ax = {"N": list(c["sweep_N"] or [c["n_particles"]]),
              "seed": list(c["sweep_seeds"] or [c["seed"]])}
        for name in ("epsilon", "dt", "theta"):
            if c[f"sweep_{name}"]:
                ax[name] = list(c[f"sweep_{name}"])
        if self.kind == "pde_run":
            ax = {"N": [c["grid_n"]], "seed": [c["seed"]]}
        return ax

    def keys(self) -> list[dict]:
        ax = self.axes()
        names = [n for n in ("N", "epsilon", "dt", "theta") if n in ax] + ["seed"]
        out = [{}]
        for n in names:
            out = [dict(k, **{n: v}) for k in out for v in ax[n]]
        seen = set()
        for k in out:
            t = key_name(k)
            if t in seen:
                raise ConfigError([f"duplicate run key {t}"])
            seen.add(t)
        return out

    def to_dict(self) -> dict:
        cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config.items()
               if k not in _PLAN_ONLY}
        return {"kind": self.kind, "version": __version__, "config": cfg,
                "overrides": list(self.overrides), "axes": self.axes()}


def key_name(key: dict) -> str:
    return "_".join(f"{k}{v!r}" if isinstance(v, float) else f"{k}{v}" for k, v in key.items())


def _run_config(plan: ExperimentPlan, key: dict) -> SimConfig:
    c = plan.config
    return SimConfig(n_particles=key["N"], sigma=c["sigma"], moment_order_k=c["moment_order_k"],
                     circulation_bound_A=c["circulation_bound_A"], dt=key.get("dt", c["dt"]),
                     t_end=c["t_end"], epsilon=key.get("epsilon", c["epsilon"]), seed=key["seed"],
                     save_times=tuple(c["save_times"]))


def _initial_vorticity(c: dict):
    if c["initial"] == "lamb_oseen":
        return GaussianVortex(c["circulation"], c["core_variance"])
    d = c["dipole_offset"] / 2
    s2 = c["core_variance"]

    def w(x, y):
        g = GaussianVortex(c["circulation"], s2, (-d, 0.0))
        h = GaussianVortex(-c["circulation"], s2, (d, 0.0))
        return g(x, y) + h(x, y)

    return VorticityField.from_function(w, c["grid_n"], c["box_length"])


def _initial_field(c: dict) -> VorticityField:
    w0 = _initial_vorticity(c)
    if isinstance(w0, VorticityField):
        return w0
    return VorticityField.from_function(w0, c["grid_n"], c["box_length"])


def _pde_path(c: dict, t_end: float, dt_particles: float):
    from .pde import run_ns2d
    pdt = c["pde_dt"] or 10 * dt_particles
    n = max(1, int(math.ceil(t_end / pdt - 1e-9)))
    pdt = t_end / n if t_end > 0 else pdt
    times = [k * pdt for k in range(n)] + [t_end] if t_end > 0 else [0.0]
    return run_ns2d(_initial_field(c), 0.5 * c["sigma"] ** 2, t_end, pdt, times,
                    normalization=c["kernel_normalization"]), pdt


def _report_rows(plan_kind, key, reports):
    return [{"kind": plan_kind, "key": key_name(key), **key, **r} for r in reports]


def _exec_interacting(plan, key, run_dir):
    from .diagnostics import functional_report
    from .estimators import KdeSpec
    from .kernels import KernelSpec
    from .sde import IntegratorSpec, run_interacting
    c = plan.config
    cfg = _run_config(plan, key)
    g0 = lift_vorticity(_initial_vorticity(c))
    spec = IntegratorSpec(c["scheme"], cfg.dt, c["drift_backend"], key.get("theta", c["theta"]),
                          c["order_p"], KernelSpec.from_epsilon(cfg.epsilon), c["clamp_step"])
    store = run_interacting(g0, cfg, spec)
    store.save(run_dir / "trajectory")
    ks = KdeSpec(shape=c["kde_grid"])
    rows = []
    for s in store.snapshots:
        rep = functional_report(s, ks, cfg.moment_order_k, c["gammas"], seed=cfg.seed).to_dict()
        rep["clamp_events"] = store.meta["clamp_events"]
        rows.append(rep)
    summary = [(m, rows[-1][m]) for m in ("entropy_H", "fisher_I", "partial_entropy_Ht",
                                          "partial_fisher_It", "moment_Mk", "min_pair_distance")]
    summary += [(f"neg_moment_{g}", v) for g, v in rows[-1]["neg_moment_gamma"].items()]
    return rows, summary


def _exec_pde(plan, key, run_dir):
    from .pde import lamb_oseen_field, relative_l1_error, write_field
    c = plan.config
    res, pdt = _pde_path(c, c["t_end"], c["dt"])
    (run_dir / "fields").mkdir(exist_ok=True)
    rows = []
    mon = res.monitor
    for k, f in enumerate(res):
        write_field(run_dir / "fields" / f"w_{k:04d}.bin", f, res.meta["nu"])
        row = {"time": f.time, "lp_norms": mon.lp_norms[k], "enstrophy": mon.enstrophy[k],
               "dissipation": mon.dissipation[k], "mean": mon.mean[k]}
        if c["initial"] == "lamb_oseen":
            t0 = c["core_variance"] / (2 * res.meta["nu"]) if res.meta["nu"] > 0 else math.inf
            if math.isfinite(t0):
                ex = lamb_oseen_field(c["grid_n"], c["box_length"], c["circulation"],
                                      res.meta["nu"], f.time, t0)
                row["rel_l1_vs_lamb_oseen"] = relative_l1_error(f, ex)
        rows.append(row)
    res_e = mon.enstrophy_residuals()
    summary = [("enstrophy_residual_max", max((abs(r) for r in res_e), default=0.0)),
               ("lp_violations", float(len(mon.lp_violations()))),
               ("cfl_warnings", float(len(mon.warnings)))]
    if "rel_l1_vs_lamb_oseen" in rows[-1]:
        summary.append(("rel_l1_vs_lamb_oseen", rows[-1]["rel_l1_vs_lamb_oseen"]))
    return rows, summary


def _exec_meanfield(plan, key, run_dir, balance=False):
    from .diagnostics import entropy_balance, functional_report
    from .estimators import KdeSpec
    from .sde import run_mean_field
    c = plan.config
    cfg = _run_config(plan, key)
    path, _ = _pde_path(c, cfg.t_end, cfg.dt)
    g0 = lift_vorticity(_initial_vorticity(c))
    store = run_mean_field(g0, list(path), cfg, c["kernel_normalization"],
                           max_gap=max(10 * cfg.dt, _pde_gap(path)))
    store.save(run_dir / "trajectory")
    ks = KdeSpec(shape=c["kde_grid"])
    if balance:
        rep = entropy_balance(store, cfg.nu, ks)
        return [rep.to_dict()], [("entropy_balance_residual", rep.residual)]
    rows = [functional_report(s, ks, cfg.moment_order_k, c["gammas"], seed=cfg.seed).to_dict()
            for s in store.snapshots]
    return rows, [("entropy_H", rows[-1]["entropy_H"]), ("fisher_I", rows[-1]["fisher_I"])]


def _pde_gap(path) -> float:
    t = [f.time for f in path]
    return max(np.diff(t)) if len(t) > 1 else 0.0


_PDE_CACHE: dict = {}


def _exec_sweep(plan, key, run_dir):
    from .diagnostics import chaos_metrics
    from .estimators import KdeSpec, neg_distance_moment
    from .kernels import KernelSpec
    from .sde import IntegratorSpec, run_interacting
    c = plan.config
    cfg = _run_config(plan, key)
    ck = json.dumps(_plain({k: c[k] for k in ("initial", "circulation", "core_variance", "dipole_offset",
                                              "grid_n", "box_length", "pde_dt", "sigma",
                                              "kernel_normalization")}) | {"t": cfg.t_end, "dt": cfg.dt},
                    sort_keys=True)
    if ck not in _PDE_CACHE:
        _PDE_CACHE[ck] = _pde_path(c, cfg.t_end, cfg.dt)[0][-1]
    field_T = _PDE_CACHE[ck]
    g0 = lift_vorticity(_initial_vorticity(c))
    spec = IntegratorSpec(c["scheme"], cfg.dt, c["drift_backend"], key.get("theta", c["theta"]),
                          c["order_p"], KernelSpec.from_epsilon(cfg.epsilon), c["clamp_step"])
    store = run_interacting(g0, cfg, spec)
    store.save(run_dir / "trajectory")
    rep = chaos_metrics([store.snapshots[-1]], field_T, KdeSpec(), KdeSpec(shape=c["pair_grid"]))
    negs = {str(g): float(np.mean([neg_distance_moment(s, g, seed=cfg.seed).value
                                   for s in store.snapshots])) for g in c["gammas"]}
    row = dict(rep.to_dict(), neg_moment_time_avg=negs, clamp_events=store.meta["clamp_events"])
    summary = [("l1_empirical_vs_pde", rep.l1_empirical_vs_pde),
               ("chaos_defect_2", rep.chaos_defect_2), ("cov_test", rep.cov_test)]
    summary += [(f"neg_moment_{g}", v) for g, v in negs.items()]
    return [row], summary


def _exec_bench(plan, key, run_dir):
    from .nbody import bench_one
    c = plan.config
    eps = key.get("epsilon", c["epsilon"])
    rows = bench_one(key["N"], key.get("theta", c["theta"]), c["order_p"], eps, key["seed"])
    summary = []
    for r in rows:
        summary.append((f"{r['backend']}_rel_err", r["rel_err"]))
        summary.append((f"{r['backend']}_seconds", r["seconds"]))
    return rows, summary


def _exec_martingale(plan, key, run_dir):
    from .diagnostics import MartingaleTest, martingale_residual
    from .kernels import KernelSpec
    from .sde import IntegratorSpec, TrajectoryStore, run_interacting
    c = plan.config
    cfg0 = _run_config(plan, key)
    mt = c["mart_times"] or (cfg0.t_end / 3, 2 * cfg0.t_end / 3, cfg0.t_end)
    cfg = SimConfig(n_particles=cfg0.n_particles, sigma=cfg0.sigma, dt=cfg0.dt, t_end=cfg0.t_end,
                    epsilon=cfg0.epsilon, seed=cfg0.seed, moment_order_k=cfg0.moment_order_k,
                    circulation_bound_A=cfg0.circulation_bound_A,
                    save_times=tuple(_all_steps(cfg0.t_end, cfg0.dt)))
    g0 = lift_vorticity(_initial_vorticity(c))
    spec = IntegratorSpec(c["scheme"], cfg.dt, c["drift_backend"], key.get("theta", c["theta"]),
                          c["order_p"], KernelSpec.from_epsilon(cfg.epsilon), c["clamp_step"])
    store = run_interacting(g0, cfg, spec)
    keep = [s for s in store.snapshots if any(abs(s.time - t) < 1e-12 for t in cfg0.save_times)]
    TrajectoryStore(keep, store.meta).save(run_dir / "trajectory")
    test = MartingaleTest(marks=tuple(("gauss", {"scale": c["mart_mark_scale"]}) for _ in mt[:-2]),
                          mark_times=tuple(mt[:-2]), phi=("gauss", {"scale": c["mart_phi_scale"]}),
                          s=mt[-2], t=mt[-1])
    F = martingale_residual(store, cfg.epsilon, test)
    return [{"F": F, "test": test.to_dict(), "epsilon": cfg.epsilon}], [("martingale_F", F)]


def _all_steps(t_end, dt):
    from .core import time_grid
    return [float(t) for t in time_grid(t_end, dt)]


EXECUTORS = {"interacting_run": _exec_interacting, "pde_run": _exec_pde,
             "mean_field_run": _exec_meanfield, "chaos_sweep": _exec_sweep,
             "nbody_bench": _exec_bench, "balance_check": lambda p, k, d: _exec_meanfield(p, k, d, True),
             "martingale_sweep": _exec_martingale}


def _json_line(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, allow_nan=True)


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    return o


def summarize(rows: list[dict]) -> str:
    """``summary.csv`` text from report rows (``summary`` entries, in row order)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "N", "seed", "value"])
    entries = [r for r in rows if r.get("record") == "summary"]
    for r in entries:
        w.writerow([r["metric"], r["N"], r["seed"], repr(float(r["value"]))])
    agg = _aggregates(entries)
    for m, n, v in agg:
        w.writerow([m, n, "*", repr(float(v))])
    return buf.getvalue()


def _aggregates(entries):
    """Per-metric medians over seeds; for martingale sweeps also the variance slope."""
    by = {}
    for r in entries:
        by.setdefault((r["metric"], r["N"]), []).append(float(r["value"]))
    out = [(f"{m}_median", n, float(np.median(v))) for (m, n), v in by.items()
           if not m.endswith("_seconds")]
    mart = {n: v for (m, n), v in by.items() if m == "martingale_F" and len(v) >= 3}
    if len(mart) >= 2:
        from .diagnostics import fit_variance_slope
        fit = fit_variance_slope(mart)
        out += [("martingale_var_slope", "*", fit.slope), ("martingale_var_slope_ci_low", "*", fit.ci_low),
                ("martingale_var_slope_ci_high", "*", fit.ci_high)]
    return out


def run_plan(plan: ExperimentPlan, resume: bool = False) -> int:
    out = plan.output_dir
    out.mkdir(parents=True, exist_ok=True)
    plan_text = json.dumps(_plain(plan.to_dict()), indent=1, sort_keys=True) + "\n"
    if resume and (out / "plan.json").exists() and (out / "plan.json").read_text() != plan_text:
        log.error("plan.json in %s differs from the requested plan; refusing to resume", out)
        return 2
    (out / "plan.json").write_text(plan_text)
    keys = plan.keys()
    failed = []
    live = open(out / "reports.ndjson", "a" if resume else "w")
    try:
        for key in keys:
            name = key_name(key)
            run_dir = out / "runs" / name
            done = run_dir / "DONE"
            if resume and done.exists():
                log.info("skipping completed run %s", name)
                continue
            if run_dir.exists():
                shutil.rmtree(run_dir)
            run_dir.mkdir(parents=True)
            log.info("running %s", name)
            try:
                rows, summary = EXECUTORS[plan.kind](plan, key, run_dir)
            except Exception as e:  # recorded per key; the plan carries on
                log.error("run %s failed: %s", name, e)
                (run_dir / "ERROR").write_text(traceback.format_exc())
                failed.append(name)
                live.write(_json_line({"kind": plan.kind, "key": name, "record": "error",
                                       "error": f"{type(e).__name__}: {e}"}) + "\n")
                live.flush()
                continue
            lines = [_json_line(dict(r, record="report")) for r in _report_rows(plan.kind, key, rows)]
            lines += [_json_line({"kind": plan.kind, "key": name, "record": "summary", "metric": m,
                                  "N": key["N"], "seed": key["seed"], "value": v}) for m, v in summary]
            text = "".join(line + "\n" for line in lines)
            live.write(text)
            live.flush()
            (run_dir / "reports.ndjson").write_text(text)
            done.write_text("")
    finally:
        live.close()
    # canonical rewrite: completed runs in plan order
    rows, canon = [], []
    for key in keys:
        f = out / "runs" / key_name(key) / "reports.ndjson"
        if (f.parent / "DONE").exists():
            text = f.read_text()
            canon.append(text)
            rows += [json.loads(line) for line in text.splitlines()]
    (out / "reports.ndjson").write_text("".join(canon))
    (out / "summary.csv").write_text(summarize(rows))
    if plan.kind == "nbody_bench":
        from .nbody import BENCH_HEADER, bench_csv_line
        bench = [r for r in rows if r.get("record") == "report"]
        (out / "bench.csv").write_text(BENCH_HEADER + "\n"
                                       + "".join(bench_csv_line(r) + "\n" for r in bench))
    if failed:
        log.error("%d run(s) failed: %s", len(failed), ", ".join(failed))
        return 1
    return 0


def _apply_threads():
    n = os.environ.get("VORTEX_THREADS")
    if not n:
        return
    import numba
    try:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    except ValueError:
        raise ConfigError([f"VORTEX_THREADS={n!r} is not a positive integer"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vortex", description="Stochastic vortex experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(KINDS) + ["validate"]:
        sp = sub.add_parser(name, help=KINDS.get(name, "check a config and echo the resolved values"))
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--resume", action="store_true", help="skip runs already completed")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved, _ = validate_config(args.config, args.set)
        _apply_threads()
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    if args.command == "validate":
        for k in sorted(resolved):
            v = resolved[k]
            print(f"{k} = {', '.join(map(repr, v)) if isinstance(v, tuple) else v}")
        return 0
    out = Path(args.out or resolved["output_dir"])
    plan = ExperimentPlan(KINDS[args.command], resolved, out, list(args.set))
    try:
        plan.keys()
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    return run_plan(plan, args.resume)


if __name__ == "__main__":
    sys.exit(main())
