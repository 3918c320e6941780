"""Command-line experiment runner: ``wealthfpk equilibrium|solve|decay|crossval``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, sde
from .config import ConfigError, RunConfig, initial_density, initial_moments, two_box_layout
from .grid import DensityOnGrid, l1_distance, observables, project_equilibrium
from .model import (
    DIVERGENT,
    NO_GUARANTEE,
    equilibrium_mode,
    equilibrium_moment,
    mean_trajectory,
    second_moment_trajectory,
    stationarity_residual,
    theoretical_decay_rate,
)
from .monitors import equilibrium_reference
from .solver import OBSERVABLE_COLUMNS, SolverConfig, SolverError, boundary_flux_audit, solve

RHO_TOL = 1e-12
MONO_TOL = 1e-10
ENVELOPE_SLACK = 1e-3


# ---------------------------------------------------------------- output helpers


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return "" if x is None else str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def density_text(f: DensityOnGrid, extra: dict[str, np.ndarray] | None = None) -> str:
    extra = extra or {}
    cols = [f.grid.centers, f.grid.widths, np.asarray(f.values)] + list(extra.values())
    return csv_text(["v_center", "width", "f", *extra], zip(*cols))


def series_text(run) -> str:
    names = list(OBSERVABLE_COLUMNS) + run.metric_columns
    return csv_text(names, zip(*[run[k] for k in names]))


def _jsonable(x):
    if x is DIVERGENT or x is NO_GUARANTEE:
        return repr(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class Check:
    name: str
    passed: bool
    value: object
    threshold: object

    def as_dict(self) -> dict:
        return {"pass": bool(self.passed), "value": self.value, "threshold": self.threshold}


def write_summary(out: Path, command: str, cfg: RunConfig, checks: list[Check], extra: dict) -> bool:
    ok = all(c.passed for c in checks)
    summary = {
        "command": command,
        "all_pass": ok,
        "checks": {c.name: c.as_dict() for c in checks},
        **extra,
    }
    atomic_write(out / "summary.json", json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    atomic_write(out / "resolved_config.toml", cfg.dumps())
    return ok


def _threads() -> int:
    raw = os.environ.get("WEALTHFPK_THREADS")
    return max(1, int(raw)) if raw else (os.cpu_count() or 1)


# ---------------------------------------------------------------- analysis


@dataclass(frozen=True)
class RateFit:
    rate: float
    r2: float
    n_points: int


def fit_rate(t, y, t_from: float, t_to: float) -> RateFit:
    """OLS of ``log y`` on ``t`` over ``[t_from, t_to]``; the rate is minus the slope."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    m = (t >= t_from - 1e-12) & (t <= t_to + 1e-12) & (y > 0)
    if m.sum() < 3:
        return RateFit(math.nan, math.nan, int(m.sum()))
    x, ly = t[m], np.log(y[m])
    slope, icept = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + icept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(-slope), r2, int(m.sum()))


def invariant_checks(run, params, f0_obs) -> tuple[list[Check], dict]:
    mass = run["mass"]
    mass0 = mass[0]
    drift = float(np.max(np.abs(mass - mass0)) / max(mass0, 1e-300)) if mass0 > 0 else float(np.max(np.abs(mass)))
    rho = run["rho_plus"]
    violations = int(np.sum(np.diff(rho) < -RHO_TOL))
    mm = np.abs(run["m_minus"])
    env = np.abs(mm[0]) * np.exp(-params.lam * run.t) * (1.0 + ENVELOPE_SLACK) + 1e-15
    env_excess = float(np.max(mm - env))
    checks = [
        Check("mass_drift", drift <= 1e-10, drift, 1e-10),
        Check("positivity_min", True, float(np.min(run["min_value"])) if "min_value" in run.columns else 0.0, 0.0),
        Check("rho_plus_monotone_violations", violations == 0, violations, 0),
        Check("m_minus_envelope_excess", env_excess <= 0, env_excess, 0.0),
    ]
    if not run.unnormalized:
        mean_target = np.array([mean_trajectory(params, f0_obs.mean, t) for t in run.t])
        dev = float(np.max(np.abs(run["mean"] - mean_target)))
        checks.append(Check("mean_deviation", dev <= 1e-6, dev, 1e-6))
    audit = boundary_flux_audit(run)
    extra = {
        "boundary_flux_audit": audit.as_dict(),
        "max_near_zero_mass": float(np.max(run["near_zero_mass"])),
        "final_near_zero_mass": float(run["near_zero_mass"][-1]),
        "unnormalized": run.unnormalized,
    }
    return checks, extra


def _solver_config(cfg: RunConfig, t_end=None, record_every=None) -> SolverConfig:
    s = cfg.tree["solver"]
    return SolverConfig(
        cfg.params,
        dt=float(s["dt"]),
        t_end=float(s["t_end"] if t_end is None else t_end),
        theta=float(s["theta"]),
        record_every=int(s["record_every"] if record_every is None else record_every),
    )


def _min_value_monitor(f: DensityOnGrid) -> float:
    return float(np.min(f.values))


def _gnuplot(csv_name: str, columns: list[str], logscale: bool = False) -> str:
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set xlabel 't'"]
    if logscale:
        lines.append("set logscale y")
    plots = [f"'{csv_name}' using 1:{i + 2} with lines" for i in range(len(columns))]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_equilibrium(cfg: RunConfig, out: Path) -> bool:
    params = cfg.params
    grid = cfg.grid()
    e = project_equilibrium(params, grid)
    stats = equilibrium_mode(params)
    residual = stationarity_residual(params, grid.centers)
    atomic_write(out / "equilibrium_density.csv", density_text(e, {"stationarity_residual": residual}))
    mu = params.mu
    moments = {f"M{r}": equilibrium_moment(params, r) for r in (0, 1, 2)}
    tail = 1.0 - e.mass
    max_res = float(np.max(np.abs(residual)))
    checks = [
        Check("stationarity_residual_max", max_res <= 1e-6, max_res, 1e-6),
        Check("mode_inside_unit_interval", 0 < stats.mode_location < 1, stats.mode_location, "(0,1)"),
    ]
    extra = {
        "mu": mu,
        "mode_location": stats.mode_location,
        "mode_value": stats.mode_value,
        "moment_order_bound": stats.moment_order_bound,
        "moments": moments,
        "projected_mass": e.mass,
        "truncated_mass": tail,
    }
    return write_summary(out, "equilibrium", cfg, checks, extra)


def cmd_solve(cfg: RunConfig, out: Path) -> bool:
    params = cfg.params
    grid = cfg.grid()
    f0 = initial_density(cfg, grid)
    scfg = _solver_config(cfg)
    monitors = dict(_named_monitors(cfg, grid, f0))
    monitors["min_value"] = _min_value_monitor
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run, final = solve(f0, scfg, monitors)
    checks, extra = invariant_checks(run, params, observables(f0))
    atomic_write(out / "observables.csv", series_text(run))
    atomic_write(out / "final_density.csv", density_text(final))
    atomic_write(out / "plot.gp", _gnuplot("observables.csv", list(OBSERVABLE_COLUMNS[1:])))
    extra["final_l1_to_equilibrium"] = l1_distance(final, equilibrium_reference(params, grid, max(f0.mass, 1e-300)))
    extra["n_steps"] = scfg.n_steps
    return write_summary(out, "solve", cfg, checks, extra)


def _named_monitors(cfg: RunConfig, grid, f0):
    from .monitors import build_monitors

    names = cfg.tree["monitors"]
    if not names:
        return {}
    return build_monitors(names, grid, cfg.params, mass=f0.mass if f0.mass > 0 else 1.0)


def _snapshot_metrics(f: DensityOnGrid, ref: DensityOnGrid, params, s_list, alphas) -> list[tuple]:
    rows = []
    target = ref.scaled(f.mass / ref.mass) if f.mass > 0 else ref
    cf = metrics.difference_transform(f, target)
    for s in s_list:
        try:
            r = metrics.dsp_metric(cf, None, s, 2.0)
            rows.append(("D_s2", s, 2.0, None, r.value, r.quadrature_error_estimate))
        except metrics.NotIntegrable:
            rows.append(("D_s2", s, 2.0, None, math.nan, math.nan))
        d = metrics.ds_metric(cf, None, s)
        rows.append(("d_s", s, math.inf, None, d.value, math.nan if d.boundary_sup else 0.0))
    for a in alphas:
        rows.append(("H_alpha", None, None, a, metrics.jensen_shannon(f, target, a), 0.0))
        rows.append(("d_H_alpha", None, None, a, metrics.hellinger(f, target, a), 0.0))
    rows.append(("L1", None, 1.0, None, l1_distance(f, target), 0.0))
    return rows


def cmd_decay(cfg: RunConfig, out: Path) -> bool:
    params = cfg.params
    grid = cfg.grid()
    f0 = initial_density(cfg, grid)
    dec = cfg.tree["decay"]
    t_end = float(dec["t_end"])
    scfg = _solver_config(cfg, t_end=t_end, record_every=int(dec["record_every"]))
    s_list = [float(s) for s in dec["s"]]
    alphas = [float(a) for a in dec["alpha"]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run, final = solve(f0, scfg, {"min_value": _min_value_monitor}, keep_snapshots=True)
    ref = project_equilibrium(params, grid)

    def job(snap):
        t, f = snap
        return [(t, *r) for r in _snapshot_metrics(f, ref, params, s_list, alphas)]

    with ThreadPoolExecutor(_threads()) as pool:
        rows = [r for chunk in pool.map(job, run.snapshots) for r in chunk]
    atomic_write(
        out / "metrics.csv",
        csv_text(list(metrics.METRIC_CSV_HEADER), rows),
    )
    atomic_write(out / "observables.csv", series_text(run))

    def series(name, s=None, a=None):
        sel = [r for r in rows if r[1] == name and r[2] == s and r[4] == a]
        return np.array([r[0] for r in sel]), np.array([r[5] for r in sel])

    checks: list[Check] = []
    rate_rows = []
    lo = 0.5 * t_end
    mu = params.mu
    for s in s_list:
        t, y = series("D_s2", s=s)
        fit = fit_rate(t, y, lo, t_end)
        theory = theoretical_decay_rate(params, s)
        asserted = s < min(mu, 2.0) and theory is not NO_GUARANTEE
        th = float("nan") if theory is NO_GUARANTEE else theory
        rate_rows.append(("D_s2", s, fit.rate, fit.r2, th, fit.rate / th if th == th and th > 0 else math.nan, asserted))
        if asserted:
            ok = fit.rate >= 0.95 * th and fit.r2 >= 0.99
            checks.append(Check(f"D_s2_rate[s={s:g}]", ok, {"rate": fit.rate, "r2": fit.r2}, {"min_rate": 0.95 * th, "min_r2": 0.99}))
    for a in alphas:
        for name in ("H_alpha", "d_H_alpha"):
            t, y = series(name, a=a)
            worst = float(np.max(np.diff(y))) if y.size > 1 else 0.0
            checks.append(Check(f"{name}_nonincreasing[alpha={a:g}]", worst <= MONO_TOL, worst, MONO_TOL))
    atomic_write(
        out / "rates.csv",
        csv_text(["metric_name", "s", "measured_rate", "r2", "theoretical_rate", "ratio", "asserted"], rate_rows),
    )
    measured = [(r[1], r[2]) for r in rate_rows if r[2] == r[2]]
    best_s = max(measured, key=lambda x: x[1])[0] if measured else math.nan
    extra = {
        "mu": mu,
        "fit_window": [lo, t_end],
        "argmax_measured_rate_s": best_s,
        "optimal_order": 0.5 * mu,
        "optimal_rate": params.sigma * mu**2 / 8.0,
    }
    return write_summary(out, "decay", cfg, checks, extra)


def sampler_for(cfg: RunConfig, f0: DensityOnGrid) -> sde.Sampler:
    ini = cfg.tree["initial"]
    fam = ini["family"]
    if fam == "gaussian":
        return sde.gaussian(ini["mean"], ini["sd"])
    if fam == "box":
        return sde.box(ini["a"], ini["b"])
    if fam == "two_box_debt":
        (a, b, w1), (c, d, w2) = two_box_layout(ini)
        return sde.mixture([w1, w2], [sde.box(a, b), sde.box(c, d)])
    if fam == "equilibrium":
        return sde.equilibrium_sampler(cfg.params)
    return sde.density_sampler(f0)


def cmd_crossval(cfg: RunConfig, out: Path) -> bool:
    params = cfg.params
    grid = cfg.grid()
    f0 = initial_density(cfg, grid)
    cv = cfg.tree["crossval"]
    n = int(cv["n_particles"])
    dt = float(cv["dt"])
    checkpoints = sorted({float(t) for t in cv["checkpoints"]})
    if not checkpoints or checkpoints[0] < 0:
        raise ConfigError("crossval.checkpoints: need at least one nonnegative time")
    t_end = checkpoints[-1]
    scfg = SolverConfig(params, dt, t_end, 1.0, max(1, int(round(1.0 / dt))))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run, final = solve(f0, scfg, snapshot_times=checkpoints)
    pde = {round(t, 9): f for t, f in run.snapshots}
    ens = sde.simulate(params, sampler_for(cfg, f0), n, dt, t_end, cfg.seed, record_times=checkpoints)
    exact = initial_moments(cfg)
    rows = []
    checks = []
    worst_l1 = 0.0
    worst_z = 0.0
    for t in checkpoints:
        f = pde[round(t, 9)]
        parts = ens.snapshots[t]
        emp = sde.empirical_density(parts, grid)
        l1 = l1_distance(emp, f)
        worst_l1 = max(worst_l1, l1)
        o = observables(f)
        if exact is not None and math.isfinite(exact[1]):
            m_ref = mean_trajectory(params, exact[0], t)
            m2_ref = second_moment_trajectory(params, max(exact[1], 1.0), t) if abs(exact[0] - 1) < 1e-12 else o.m2_full
        else:
            m_ref, m2_ref = o.mean, o.m2_full
        for k, chunk in enumerate(ens.chunks(parts)):
            est = sde.moments(chunk)
            zm = abs(est.mean - m_ref) / est.mean_se if est.mean_se > 0 else 0.0
            z2 = abs(est.m2 - m2_ref) / est.m2_se if est.m2_se > 0 else 0.0
            worst_z = max(worst_z, zm, z2)
            rows.append((t, k, chunk.size, l1, o.mean, est.mean, est.mean_se, m_ref, o.m2_full, est.m2, est.m2_se, m2_ref))
    if n >= 1_000_000:
        checks.append(Check("max_l1_pde_vs_ensemble", worst_l1 <= 0.03, worst_l1, 0.03))
    checks.append(Check("max_moment_z_score", worst_z <= 4.0, worst_z, 4.0))
    atomic_write(
        out / "crossval.csv",
        csv_text(
            ["t", "chunk", "n", "l1", "pde_mean", "sde_mean", "sde_mean_se", "exact_mean", "pde_m2", "sde_m2", "sde_m2_se", "exact_m2"],
            rows,
        ),
    )
    extra = {"n_particles": n, "dt": dt, "checkpoints": checkpoints, "max_l1": worst_l1}
    return write_summary(out, "crossval", cfg, checks, extra)


COMMANDS = {
    "equilibrium": cmd_equilibrium,
    "solve": cmd_solve,
    "decay": cmd_decay,
    "crossval": cmd_crossval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wealthfpk", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    p.add_argument("--out", type=Path, default=None, help="output directory (default ./wealthfpk-out/<command>)")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or Path("wealthfpk-out") / args.command
    try:
        cfg = RunConfig.load(args.config).with_seed(args.seed)
        start = time.perf_counter()
        ok = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error at {getattr(exc, 'filename', None) or out}: {exc}", file=sys.stderr)
        return 2
    summary = json.loads((out / "summary.json").read_text())
    for name, c in summary["checks"].items():
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {name}: {c['value']} (threshold {c['threshold']})")
    print(f"{args.command} finished in {time.perf_counter() - start:.1f}s; outputs in {out}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
