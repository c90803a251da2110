"""
Run orchestration: build the solver problem from an :class:`ExperimentConfig`,
compute the grid reference, synthesize observations, run GPPI and/or the
Schwarz-Newton accelerator, and write the outputs.

Draw order for a given seed: observed-field node indices, their noise, V
point coordinates, their noise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ConfigError, GPPIError
from ..gp_core import Observations
from ..hjb import HJBConfig, HJBProblem, hjb_reference
from ..kernels import KernelSpec
from ..mfg_stationary import PowerCoupling, ReferenceFields, StationaryConfig, StationaryMFG
from ..mfg_timedep import TimeDepConfig, TimeDepMFG, timedep_reference
from ..policy import HamiltonianSpec
from ..problem import PolicyIterationProblem, RunControls, run_gppi
from ..reference import Grid, GridField, classical_pi_stationary, l2_error
from ..report import RunReport
from ..schwarz import SchwarzNewton, SchwarzOptions
from .config import ExperimentConfig
from .observations import choose_nodes, make_rng, synthesize_observations, uniform_points

log = logging.getLogger(__name__)

ERROR_HEADER = ("iteration", "l2_error_m", "l2_error_u", "residual_norm", "seconds")


@dataclass
class Experiment:
    """Everything needed to run one config: the solver config plus reference data."""

    config: ExperimentConfig
    solver_config: Any
    V_true: Any
    reference: dict[str, Any] = field(default_factory=dict)
    setup_seconds: float = 0.0

    def problem(self) -> PolicyIterationProblem:
        s = self.config.solver
        if s == "mfg_stationary":
            return StationaryMFG(self.solver_config)
        if s == "hjb":
            return HJBProblem(self.solver_config)
        return TimeDepMFG(self.solver_config)


# --------------------------------------------------------------------------
# building
# --------------------------------------------------------------------------


def _kernel(spec: dict, dims: int, has_time: bool = False) -> KernelSpec:
    try:
        return KernelSpec(spec["family"], tuple(spec["lengthscales"]), dims=dims, has_time=has_time)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "kernels") from None


def _controls(cfg: ExperimentConfig) -> RunControls:
    c = cfg.section("controls")
    return RunControls(max_iter=c["max_iter"], tol=c["tol"])


def _obs_spec(cfg: ExperimentConfig, name: str) -> dict:
    return cfg.section("observations").get(name, {"count": 0, "gamma": 0.0})


def _v_observations(cfg, V, rng, lower, period) -> Observations | None:
    spec = _obs_spec(cfg, "v")
    if spec["count"] == 0:
        return None
    pts = uniform_points(spec["count"], cfg.dims, lower, period, rng)
    return synthesize_observations(V, pts, spec["gamma"], rng, cfg.section("alphas")["vo"])


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    """Solver config, grid reference and synthetic data for ``cfg``."""
    t0 = time.perf_counter()
    builder = {"mfg_stationary": _build_stationary, "hjb": _build_hjb, "mfg_timedep": _build_timedep}[cfg.solver]
    exp = builder(cfg)
    exp.setup_seconds = time.perf_counter() - t0
    return exp


def _build_stationary(cfg: ExperimentConfig) -> Experiment:
    dom, eq, al, ini = (cfg.section(k) for k in ("domain", "equation", "alphas", "init"))
    d = cfg.dims
    if dom["period"] != 1.0:
        raise ConfigError("the stationary solver works on unit-period boxes", "domain.period")
    V = cfg.expression("V")
    F = PowerCoupling(eq["coupling_exponent"], eq.get("coupling_scale", 1.0))
    grid = Grid.periodic_box(dom["n"], d, dom["lower"], dom["period"])
    ref = classical_pi_stationary(grid, eq["nu"], V, F, tol=cfg.section("reference").get("tol", 1e-8))
    rng = make_rng(cfg.seed)
    obs_m = None
    spec = _obs_spec(cfg, "m")
    if spec["count"] > 0:
        idx = choose_nodes(grid.size, spec["count"], rng)
        obs_m = synthesize_observations(ref.m.values[idx], grid.points[idx], spec["gamma"], rng, al["mo"])
    obs_v = _v_observations(cfg, V, rng, dom["lower"], dom["period"])
    ks = {k: _kernel(v, d) for k, v in cfg.section("kernels").items()}
    sc = StationaryConfig(
        dims=d, n=dom["n"], lower=dom["lower"], nu=eq["nu"], ham=HamiltonianSpec(dims=d), F=F, V=V,
        kernel_m=ks["m"], kernel_u=ks["u"], kernel_v=ks["v"], kernel_q=ks["q"],
        alpha_m=al["m"], alpha_mo=al["mo"], alpha_u=al["u"], alpha_lambda=al["lambda"],
        alpha_v=al["v"], alpha_vo=al["vo"], obs_m=obs_m, obs_v=obs_v,
        m_init=ini["m"], q_init=ini["q"], v_init=ini["v"],
        nugget=cfg.section("nugget")["eta"], nugget_mode=cfg.section("nugget")["mode"],
        controls=_controls(cfg), reference=ReferenceFields(grid, ref.m, ref.u, ref.lam),
    )
    return Experiment(cfg, sc, V, {"grid": grid, "m": ref.m, "u": ref.u, "lambda": ref.lam,
                                   "reference_iterations": ref.iterations})


def _build_hjb(cfg: ExperimentConfig) -> Experiment:
    dom, eq, al, ini = (cfg.section(k) for k in ("domain", "equation", "alphas", "init"))
    V = cfg.expression("V")
    U_T = cfg.expression("U_T")
    ham = HamiltonianSpec(eq["hamiltonian"], 1, A=eq.get("A", 0.0), B=eq.get("B", 1.0), R_cost=eq.get("R", 1.0))
    ks = cfg.section("kernels")
    common = dict(dims=1, lower=dom["lower"], period=dom["period"], T=dom["T"], nx=dom["nx"], nt=dom["nt"],
                  sigma=eq["sigma"], ham=ham, V=V, U_T=U_T,
                  kernel_u=_kernel(ks["u"], 1, True), kernel_q=_kernel(ks["q"], 1, True),
                  kernel_v=_kernel(ks["v"], 1))
    base = HJBConfig(**common)
    ref = hjb_reference(base, refine=cfg.section("reference").get("refine", 8))
    grid = base.grid()
    rng = make_rng(cfg.seed)
    obs_u = None
    spec = _obs_spec(cfg, "u")
    if spec["count"] > 0:
        idx = choose_nodes(grid.size, spec["count"], rng)
        obs_u = synthesize_observations(ref.values[idx], grid.points[idx], spec["gamma"], rng, al["uo"])
    obs_v = _v_observations(cfg, V, rng, dom["lower"], dom["period"])
    hc = HJBConfig(**common, alpha_u=al["u"], alpha_v=al.get("v", 0.0), alpha_vo=al.get("vo", 0.0),
                   alpha_uo=al.get("uo", 0.0), obs_u=obs_u, obs_v=obs_v, q_init=ini["q"], v_init=ini["v"],
                   nugget=cfg.section("nugget")["eta"], nugget_mode=cfg.section("nugget")["mode"],
                   controls=_controls(cfg), reference=ref)
    return Experiment(cfg, hc, V, {"grid": grid, "u": ref})


def _build_timedep(cfg: ExperimentConfig) -> Experiment:
    dom, eq, al, ini = (cfg.section(k) for k in ("domain", "equation", "alphas", "init"))
    V = cfg.expression("V")
    ks = cfg.section("kernels")
    common = dict(dims=1, lower=dom["lower"], period=dom["period"], T=dom["T"], nx=dom["nx"], nt=dom["nt"],
                  n_boundary=dom["n_boundary"], nu=eq["nu"],
                  F=PowerCoupling(eq["coupling_exponent"], eq.get("coupling_scale", 1.0)), V=V,
                  m0=cfg.expression("m0"), U_T=cfg.expression("U_T"),
                  kernel_m=_kernel(ks["m"], 1, True), kernel_u=_kernel(ks["u"], 1, True),
                  kernel_q=_kernel(ks["q"], 1, True), kernel_v=_kernel(ks["v"], 1))
    base = TimeDepConfig(**common)
    rs = cfg.section("reference")
    ref = timedep_reference(base, refine=rs.get("refine", 4), tol=rs.get("tol", 1e-8),
                            relaxation=rs.get("relaxation", 0.5))
    rng = make_rng(cfg.seed)
    obs_m = None
    spec = _obs_spec(cfg, "m")
    if spec["count"] > 0:
        inner = base.nodes()[0]
        idx = choose_nodes(inner.shape[0], spec["count"], rng)
        exact = _grid_lookup(ref.m, inner[idx])
        obs_m = synthesize_observations(exact, inner[idx], spec["gamma"], rng, al["mo"])
    obs_v = _v_observations(cfg, V, rng, dom["lower"], dom["period"])
    tc = TimeDepConfig(**common, alpha_m=al["m"], alpha_mo=al["mo"], alpha_u=al["u"], alpha_v=al["v"],
                       alpha_vo=al["vo"], obs_m=obs_m, obs_v=obs_v, m_init=ini["m"], u_init=ini["u"],
                       q_init=ini["q"], v_init=ini["v"], nugget=cfg.section("nugget")["eta"],
                       nugget_mode=cfg.section("nugget")["mode"], controls=_controls(cfg), reference=ref)
    return Experiment(cfg, tc, V, {"grid": ref.grid, "m": ref.m, "u": ref.u})


def _grid_lookup(f: GridField, points: np.ndarray) -> np.ndarray:
    """Values of ``f`` at points that are grid nodes."""
    g = f.grid
    idx = np.zeros(points.shape[0], dtype=int)
    for k in range(len(g.counts)):
        i = np.rint((points[:, k] - g.starts[k]) / g.spacings[k]).astype(int)
        if g.periodic[k]:
            i %= g.counts[k]
        if np.any(np.abs(g.starts[k] + i * g.spacings[k] - points[:, k]) > 1e-9) and not g.periodic[k]:
            raise ValueError("observation point is not a grid node")
        idx = idx * g.counts[k] + i
    return f.values[idx]


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------


def run_method(exp: Experiment, method: str) -> RunReport:
    """One solver run; solver failures are recorded in the report."""
    cfg = exp.config
    prob = None
    try:
        prob = exp.problem()
        if method == "gppi":
            report = run_gppi(prob, exp.solver_config.controls, "gppi")
        elif method == "as":
            sw = cfg.section("schwarz")
            opts = SchwarzOptions(damping=sw["damping"], jacobian_point=sw["jacobian_point"])
            report = SchwarzNewton(prob, opts).solve(exp.solver_config.controls, "as")
        else:
            raise ConfigError(f"unknown method {method!r}", "method")
    except (GPPIError, np.linalg.LinAlgError, FloatingPointError) as exc:
        if isinstance(exc, ConfigError):
            raise
        log.error("%s %s failed: %s", cfg.problem, method, exc)
        report = RunReport(problem=cfg.problem, method=method, converged=False, message=f"solver failure: {exc}")
    report.problem = cfg.problem
    report.extra["seed"] = cfg.seed
    report.timings["setup"] = exp.setup_seconds
    _attach_reference_metrics(exp, report)
    return report


def _attach_reference_metrics(exp: Experiment, report: RunReport) -> None:
    lam_ref = exp.reference.get("lambda")
    if lam_ref is not None:
        report.extra["lambda_reference"] = float(lam_ref)
    Vf = report.fields.get("V")
    if Vf is not None and exp.V_true is not None:
        exact = GridField(Vf.grid, exp.V_true(Vf.grid.points))
        report.extra["l2_error_V"] = l2_error(Vf, exact)
        report.extra["sup_error_V"] = float(np.max(np.abs(Vf.values - exact.values)))


def run_experiment(cfg: ExperimentConfig, method: str | None = None, out: str | Path | None = None,
                   seed: int | None = None, write: bool = True) -> list[RunReport]:
    """Run the configured method(s) and write outputs to ``out`` (or the config's ``out``).

    For ``both`` the two solvers run one after the other on the same data;
    a ``comparison.json`` is written alongside the per-method files.
    """
    cfg = cfg.replace(method=method, seed=seed, out=out)
    exp = build_experiment(cfg)
    methods = ["gppi", "as"] if cfg.method == "both" else [cfg.method]
    reports = [run_method(exp, m) for m in methods]
    if write:
        cfg.out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            write_outputs(r, cfg, cfg.out)
        if len(reports) == 2:
            _write_json(cfg.out / f"{cfg.problem}_comparison.json", compare_methods(*reports))
    return reports


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


def write_error_csv(report: RunReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ERROR_HEADER)
        for rec in report.history:
            w.writerow([rec.iteration, _fmt(rec.l2_error_m), _fmt(rec.l2_error_u), _fmt(rec.residual_norm),
                        _fmt(rec.seconds)])


def write_grid_csv(field: GridField, path: Path) -> None:
    """One row per node: coordinates (one column per axis) then the value."""
    pts = field.grid.points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(field.grid.names) + ["value"])
        for p, v in zip(pts, field.values):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def _clean(obj):
    """JSON-safe copy: non-finite floats become ``None``, arrays become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (str, int, bool)) or obj is None:
        return obj
    return str(obj)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def report_dict(report: RunReport, cfg: ExperimentConfig | None = None) -> dict:
    out = report.summary()
    out["extra"] = {k: v for k, v in report.extra.items()}
    out["history"] = [
        {"iteration": r.iteration, "l2_error_m": r.l2_error_m, "l2_error_u": r.l2_error_u,
         "residual_norm": r.residual_norm, "change": r.change, "seconds": r.seconds}
        for r in report.history
    ]
    if cfg is not None:
        out["config"] = cfg.to_dict()
    return _clean(out)


def write_outputs(report: RunReport, cfg: ExperimentConfig, out: Path) -> dict[str, Path]:
    """Error CSV, one grid CSV per field and the JSON report; returns the paths."""
    stem = f"{cfg.problem}_{report.method}"
    paths = {"errors": out / f"{stem}_errors.csv", "report": out / f"{stem}_report.json"}
    write_error_csv(report, paths["errors"])
    for name, f in report.fields.items():
        if isinstance(f, GridField):
            paths[f"grid_{name}"] = out / f"{stem}_grid_{name}.csv"
            write_grid_csv(f, paths[f"grid_{name}"])
    _write_json(paths["report"], report_dict(report, cfg))
    return paths


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------


def _as_dict(r) -> dict:
    if isinstance(r, RunReport):
        return report_dict(r)
    if isinstance(r, (str, Path)):
        try:
            return json.loads(Path(r).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {r}: {exc}") from None
    return dict(r)


def _ratio(b, a):
    if a is None or b is None:
        return None
    a, b = float(a), float(b)
    if a == b:
        return 1.0
    return b / a if a != 0 else None


def _final_error(d: dict):
    for key in ("final_l2_error_m", "final_l2_error_u"):
        if d.get(key) is not None:
            return key, d[key]
    return None, None


def compare_methods(report_a, report_b) -> dict:
    """Summary of run ``b`` relative to run ``a`` (ratios are ``b / a``).

    ``iterations_to_match`` is the first iteration at which ``b``'s density
    error is within 1.5 times ``a``'s final density error.
    """
    a, b = _as_dict(report_a), _as_dict(report_b)
    if a.get("problem") != b.get("problem"):
        raise ConfigError(f"reports are for different problems ({a.get('problem')} vs {b.get('problem')})",
                          "problem")
    la, lb = a.get("lambda"), b.get("lambda")
    key, ea = _final_error(a)
    eb = b.get(key) if key else None
    match = None
    if a.get("final_l2_error_m") is not None:
        target = 1.5 * a["final_l2_error_m"]
        for rec in b.get("history", []):
            e = rec.get("l2_error_m")
            if e is not None and e <= target:
                match = rec["iteration"]
                break
    return {
        "problem": a.get("problem"),
        "methods": [a.get("method"), b.get("method")],
        "delta_lambda": abs(la - lb) if la is not None and lb is not None else None,
        "error_metric": key,
        "final_error_ratio": _ratio(eb, ea),
        "iteration_ratio": _ratio(b.get("iterations"), a.get("iterations")),
        "runtime_ratio": _ratio(b.get("timings", {}).get("total"), a.get("timings", {}).get("total")),
        "iterations": [a.get("iterations"), b.get("iterations")],
        "converged": [a.get("converged"), b.get("converged")],
        "iterations_to_match": match,
    }
