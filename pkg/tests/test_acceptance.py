"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed in the "acceptance criteria"
section of the pytest summary) and then asserts the criterion as stated.
"""

import csv
import json
import math
import time

import numpy as np
import pytest
from scipy import integrate, special, stats
from scipy.optimize import brentq

from conftest import report
from wealthfpk import metrics
from wealthfpk.cli import main
from wealthfpk.config import SHIPPED, RunConfig, initial_density, shipped_configs
from wealthfpk.grid import DensityOnGrid, build_grid, l1_distance, observables, project, project_equilibrium
from wealthfpk.model import (
    ModelParams,
    optimal_decay_order,
    optimal_decay_rate,
    second_moment_trajectory,
    theoretical_decay_rate,
)
from wealthfpk.monitors import equilibrium_reference
from wealthfpk.solver import SolverConfig, boundary_flux_audit, solve

pytestmark = pytest.mark.acceptance

UNIT = ModelParams(1.0, 1.0)
PAIRS = [(1.0, 1.0), (1.0, 0.5), (0.5, 2.0)]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def long_run(default_grid, debt_gaussian):
    start = time.perf_counter()
    run, final = solve(debt_gaussian, SolverConfig(UNIT, dt=0.01, t_end=50.0, record_every=10), ["l1"])
    return run, final, time.perf_counter() - start


def test_c01_conservation(long_run):
    run, _, seconds = long_run
    mass_err = float(np.max(np.abs(run["mass"] - 1.0)))
    mean_err = float(np.max(np.abs(run["mean"] - 1.0)))
    ok = mass_err <= 1e-10 and mean_err <= 1e-6 and seconds <= 30
    report(1, ok, f"max|mass-1|={mass_err:.2e} (<=1e-10), max|mean-1|={mean_err:.2e} (<=1e-6), {seconds:.1f}s (<=30s)")
    assert ok


def test_c02_steady_state(default_grid, debt_gaussian):
    start = time.perf_counter()
    cfg = SolverConfig(UNIT, dt=0.01, t_end=20.0, record_every=100)
    run, coarse = solve(debt_gaussian, cfg, ["l1"])
    fine_grid = build_grid(-10.0, 5000.0, 8000, 1000.0)
    _, fine = solve(project(lambda v: stats.norm.pdf(v, 1.0, 1.0), fine_grid), cfg)
    seconds = time.perf_counter() - start
    l1_coarse = l1_distance(coarse, equilibrium_reference(UNIT, default_grid, coarse.mass))
    l1_fine = l1_distance(fine, equilibrium_reference(UNIT, fine_grid, fine.mass))
    ratio = l1_coarse / l1_fine
    ok = l1_coarse <= 5e-3 and ratio >= 3.0 and seconds <= 60
    report(
        2,
        ok,
        f"L1(t=20)={l1_coarse:.2e} (<=5e-3); floor ratio h/(h/2)={ratio:.2f} (>=3); {seconds:.1f}s (<=60s)",
    )
    assert ok


def test_c03_second_moment(default_grid, debt_gaussian):
    p = ModelParams(1.0, 0.5)
    run, _ = solve(debt_gaussian, SolverConfig(p, dt=1e-3, t_end=10.0, record_every=100))
    m20 = observables(debt_gaussian).m2_full
    exact = np.array([second_moment_trajectory(p, m20, t) for t in run.t])
    rel = float(np.max(np.abs(run["m2_full"] / exact - 1.0)))
    ok = rel <= 1e-3
    report(3, ok, f"max relative M2 error on [0,10] = {rel:.2e} (<=1e-3)")
    assert ok


def test_c04_mass_migration(default_grid, debt_gaussian):
    run, _ = solve(debt_gaussian, SolverConfig(UNIT, dt=1e-3, t_end=20.0, record_every=10))
    violations = int(np.sum(np.diff(run.step_rho_plus) < -1e-12))
    audit = boundary_flux_audit(run)
    ok = violations == 0 and abs(audit.mismatch) <= 2e-3
    report(
        4,
        ok,
        f"rho_plus decreases={violations} (0); gain {audit.rho_plus_gain:.5f} vs lam*int f(0) "
        f"{audit.boundary_integral:.5f}, |diff|={abs(audit.mismatch):.2e} (<=2e-3)",
    )
    assert ok


def test_c05_debt_decay(default_grid):
    worst = -math.inf
    cases = 0
    for path in shipped_configs():
        f0 = initial_density(RunConfig.load(path), default_grid)
        for lam, sigma in PAIRS:
            p = ModelParams(lam, sigma)
            run, _ = solve(f0, SolverConfig(p, dt=0.01, t_end=10.0, record_every=10))
            mm = np.abs(run["m_minus"])
            env = mm[0] * np.exp(-lam * run.t) * (1.0 + 1e-3)
            worst = max(worst, float(np.max(mm / env)))
            cases += 1
    ok = cases == 9 and worst <= 1.0
    report(5, ok, f"{cases} runs; max |m_-(t)| / (|m_-(0)| e^(-lam t) (1+1e-3)) = {worst:.6f} (<=1)")
    assert ok


@pytest.fixture(scope="module")
def decay_outputs(tmp_path_factory):
    out = tmp_path_factory.mktemp("decay")
    start = time.perf_counter()
    code = main(["decay", "--config", str(SHIPPED / "debt_gaussian.toml"), "--out", str(out)])
    seconds = time.perf_counter() - start
    rates = {float(r["s"]): r for r in read_csv(out / "rates.csv")}
    summary = json.loads((out / "summary.json").read_text())
    return code, rates, summary, seconds


def test_c06_metric_decay(decay_outputs):
    _, rates, _, seconds = decay_outputs
    parts = []
    ok = True
    for s in (0.75, 1.0, 1.25):
        r = rates[s]
        rate, r2 = float(r["measured_rate"]), float(r["r2"])
        need = 0.95 * (s / 2) * ((1 - s) * UNIT.sigma + 2 * UNIT.lam)
        ok &= rate >= need and r2 >= 0.99
        parts.append(f"s={s}: rate {rate:.3f} (>= {need:.3f}), R2 {r2:.5f}")
    per_s = seconds / len(rates)
    ok &= per_s <= 120
    report(6, ok, "; ".join(parts) + f"; {per_s:.0f}s per s (<=120s)")
    assert ok


def test_c07_optimal_rate(decay_outputs):
    _, rates, _, _ = decay_outputs
    s_grid = sorted(rates)
    measured = [float(rates[s]["measured_rate"]) for s in s_grid]
    best = s_grid[int(np.argmax(measured))]
    spacing = float(np.min(np.diff(s_grid)))
    star = optimal_decay_order(UNIT)
    near = abs(best - star) <= spacing + 1e-12
    r_star = theoretical_decay_rate(UNIT, star)
    closed = UNIT.sigma * UNIT.mu**2 / 8
    exact = r_star == closed and optimal_decay_rate(UNIT) == closed
    ok = near and exact
    report(
        7,
        ok,
        f"argmax of fitted rates at s={best:g}, mu/2={star:g} (within {spacing:g}: {near}); "
        f"r(mu/2)={r_star!r} vs sigma mu^2/8={closed!r} (equal: {exact})",
    )
    assert ok


@pytest.fixture(scope="module")
def entropy_run(default_grid, debt_gaussian):
    names = [f"{k}:{a}" for a in (0.25, 0.5, 0.75) for k in ("js", "js_prod", "hellinger", "hel_prod")] + ["f0"]
    run, _ = solve(debt_gaussian, SolverConfig(UNIT, dt=0.01, t_end=8.0, record_every=1), names)
    return run


def _balances(run, t1=1.0, t2=5.0):
    t = run.t
    m = (t >= t1 - 1e-9) & (t <= t2 + 1e-9)
    tt = t[m]
    out = {}
    boundary = UNIT.lam * integrate.trapezoid(run["f0"][m], tt)
    for a in (0.25, 0.5, 0.75):
        h = run[f"js:{a}"][m]
        dh = h[-1] - h[0]
        prod = integrate.trapezoid(run[f"js_prod:{a}"][m], tt)
        d2 = run[f"hellinger:{a}"][m] ** 2
        dd = d2[-1] - d2[0]
        hprod = integrate.trapezoid(run[f"hel_prod:{a}"][m], tt)
        out[a] = (
            abs(dh + prod + boundary) / abs(dh),  # with the boundary term
            abs(dh + prod) / abs(dh),  # without it
            abs(dd + hprod) / abs(dd),
        )
    return out


def test_c08_entropy_monotone_and_identities(entropy_run):
    run = entropy_run
    worst_step = max(
        float(np.max(np.diff(run[f"{k}:{a}"]))) for a in (0.25, 0.5, 0.75) for k in ("js", "hellinger")
    )
    bal = _balances(run)
    js_lit = max(v[0] for v in bal.values())
    js_free = max(v[1] for v in bal.values())
    hel = max(v[2] for v in bal.values())
    monotone = worst_step <= 1e-10
    ok = monotone and js_lit <= 2e-2 and hel <= 2e-2
    report(
        8,
        ok,
        f"max step increase {worst_step:.1e} (<=1e-10); JS identity with f(0) term rel. residual {js_lit:.2e}, "
        f"Hellinger identity {hel:.2e} (<=2e-2)",
    )
    # informational: the same balance without the boundary term
    report(8, js_free <= 2e-2, f"(info) JS identity without the f(0) term: rel. residual {js_free:.2e} (<=2e-2)")
    assert ok


def test_c09_sobolev_growth(default_grid, debt_gaussian):
    r = 0.5
    p = UNIT
    run, _ = solve(debt_gaussian, SolverConfig(p, dt=0.01, t_end=10.0, record_every=10), [f"sobolev:{r}"])
    ratio = run[f"sobolev:{r}"] / run[f"sobolev:{r}"][0]
    bound = np.exp((2 * r + 1) / 2 * (p.sigma * (2 * r + 3) / 2 + 2 * p.lam) * run.t)
    worst = float(np.max(ratio / bound))
    ok = worst <= 1.0
    report(9, ok, f"max (H_r(t)/H_r(0)) / bound over {run.t.size} checkpoints = {worst:.4f} (<=1)")
    assert ok


def _random_density(rng, grid):
    """Random mixture of Gaussians and boxes, tilted so mass and mean are exactly 1."""
    c = grid.centers
    vals = np.zeros(grid.n_cells)
    # one component centred below 1 and one above, so a tilt can reach mean 1
    centres = [rng.uniform(-2.0, 0.8), rng.uniform(1.2, 4.0)] + list(rng.uniform(-2.0, 4.0, rng.integers(0, 2)))
    for m in centres:
        w = rng.uniform(0.2, 1.0)
        if rng.random() < 0.5:
            vals += w * stats.norm.pdf(c, m, rng.uniform(0.3, 2.0))
        else:
            half = rng.uniform(0.25, 1.5)
            vals += w * ((c > m - half) & (c < m + half)) / (2 * half)
    keep = vals * grid.widths > 0
    log_base = np.log(vals[keep] * grid.widths[keep])
    ck = c[keep]

    def weights(theta):
        lw = log_base + theta * (ck - 1.0)
        return np.exp(lw - lw.max())

    def mean_gap(theta):
        wt = weights(theta)
        return np.dot(wt, ck) / wt.sum() - 1.0

    wt = weights(brentq(mean_gap, -50, 50, xtol=1e-15))
    out = np.zeros(grid.n_cells)
    out[keep] = wt / wt.sum() / grid.widths[keep]
    return DensityOnGrid(grid, out)


def test_c10_metric_inequalities():
    rng = np.random.default_rng(20240601)
    grid = build_grid(-8.0, 200.0, 1200, 40.0)
    p = ModelParams(1.0, 0.5)
    finf = project_equilibrium(p, grid).normalized()
    violations = {k: 0 for k in ("est5", "est6", "dl", "ldd", "Joh", "bbc")}
    for _ in range(100):
        f, g = _random_density(rng, grid), _random_density(rng, grid)
        d = metrics.difference_transform(f, g)
        assert d.vanishing_order == 2
        for r, s in ((1.0, 2.0), (0.5, 1.5), (0.5, 1.0)):
            ds = metrics.ds_metric(d, None, s).value
            d1 = metrics.dsp_metric(d, None, r, 1.0)
            c1 = 2 ** (2 - r / s) * s / (r * (s - r))
            if d1.value - d1.quadrature_error_estimate > c1 * ds ** (r / s):
                violations["est5"] += 1
            d2 = metrics.dsp_metric(d, None, r, 2.0)
            c2 = 2 ** (1 - r / s) * (2 * s / (2 * r * (s - r))) ** 0.5
            if d2.value - d2.quadrature_error_estimate > c2 * ds ** (r / s):
                violations["est6"] += 1
        dh = metrics.hellinger(f, g)
        if l1_distance(f, g) > math.sqrt(2) * dh * math.sqrt(f.mass + g.mass) * (1 + 1e-12):
            violations["dl"] += 1
        if metrics.hellinger(f, finf) ** 2 > l1_distance(f, finf) * (1 + 1e-12):
            violations["ldd"] += 1
        bc = metrics.bhattacharyya(f, g)
        if 1 - bc**2 < 0.5 * dh**2 * (1 - 1e-12):
            violations["Joh"] += 1
        for a in (0.25, 0.5, 0.75):
            mix = a * np.asarray(f.values) + (1 - a) * np.asarray(finf.values)
            on = np.asarray(finf.values) > 0
            norm = float(np.dot(np.asarray(finf.values)[on] ** 2 / mix[on], grid.widths[on]))
            if not (1 - 1e-12 <= norm <= 1 / (1 - a) * (1 + 1e-12)):
                violations["bbc"] += 1
    total = sum(violations.values())
    ok = total == 0
    report(10, ok, "100 random pairs; violations " + ", ".join(f"{k}={v}" for k, v in violations.items()))
    assert ok


def _battery(p, snapshot):
    # phi = sqrt(f_inf / g) for a mid-run snapshot g, interpolated on the positive cells
    g = snapshot
    z = g.grid.zero_edge
    c = g.grid.centers[z:]
    fv = np.asarray(g.values)[z:]
    einf = np.asarray(project_equilibrium(p, g.grid).values)[z:]
    keep = (fv > 1e-200) & (einf > 1e-200)
    ratio = np.sqrt(einf[keep] / fv[keep])
    cc = c[keep]

    def root_ratio(v):
        return float(np.interp(v, cc, ratio))

    return [
        ("v", lambda v: v, None),
        ("2-3v", lambda v: 2.0 - 3.0 * v, None),
        ("log1p", np.log1p, None),
        ("sqrt", np.sqrt, None),
        ("tanh", np.tanh, None),
        ("v^1.5", lambda v: v**1.5, None),
        ("v/(1+v)", lambda v: v / (1.0 + v), None),
        ("arctan", np.arctan, None),
        ("exp(-v)", lambda v: np.exp(-v), None),
        ("v^2", lambda v: v * v, None),
        ("1/(1+v)^2", lambda v: 1.0 / (1.0 + v) ** 2, None),
        ("v^0.25", lambda v: v**0.25, None),
        ("log1p^2", lambda v: np.log1p(v) ** 2, None),
        ("erf", special.erf, None),
        ("v exp(-v)", lambda v: v * np.exp(-v), None),
        ("(v-1)^2", lambda v: (v - 1.0) ** 2, None),
        ("sqrt(1+v^2)", lambda v: math.sqrt(1.0 + v * v), None),
        ("v^1.2", lambda v: v**1.2, None),
        ("exp(-1/v)", lambda v: math.exp(-1.0 / v) if v > 0 else 0.0, None),
        ("sqrt(f_inf/g)", root_ratio, 0.0),
    ]


def test_c11_chernoff(default_grid, debt_gaussian):
    p = ModelParams(1.0, 0.5)
    _, mid = solve(debt_gaussian, SolverConfig(p, dt=0.01, t_end=2.0))
    battery = _battery(p, mid)
    fails = []
    for name, phi, growth in battery:
        r = metrics.chernoff_check(p, phi, growth=growth)
        if not r.holds():
            fails.append(name)
        if r.affine and abs(r.variance - r.bound) > 1e-8 * r.bound:
            fails.append(name + " (equality)")
    lin = metrics.chernoff_check(p, lambda v: v, dphi=lambda v: 1.0)
    third = abs(lin.variance - 1 / 3) <= 1e-8 / 3 and abs(lin.bound - 1 / 3) <= 1e-8 / 3
    ok = len(battery) == 20 and not fails and third
    report(
        11,
        ok,
        f"{len(battery)} functions, failures {fails or 'none'}; phi=v at mu=5: "
        f"var={lin.variance:.12f}, bound={lin.bound:.12f} (1/3)",
    )
    assert ok


def test_c12_sde_crossval(tmp_path):
    cfg = tmp_path / "cv.toml"
    cfg.write_text((SHIPPED / "debt_gaussian.toml").read_text())
    out = tmp_path / "cv"
    start = time.perf_counter()
    code = main(["crossval", "--config", str(cfg), "--out", str(out)])
    seconds = time.perf_counter() - start
    s = json.loads((out / "summary.json").read_text())
    rows = read_csv(out / "crossval.csv")
    seeds = len({r["chunk"] for r in rows})
    l1 = s["checks"]["max_l1_pde_vs_ensemble"]["value"]
    z = s["checks"]["max_moment_z_score"]["value"]
    ok = code == 0 and s["n_particles"] == 1_000_000 and seeds == 10 and l1 <= 0.03 and z <= 4 and seconds <= 300
    report(12, ok, f"n=1e6, dt=1e-3: max L1={l1:.4f} (<=0.03); max |z| over {seeds} seeds={z:.2f} (<=4); {seconds:.0f}s (<=300s)")
    assert ok


def test_c13_l1_convergence(default_grid):
    parts = []
    ok = True
    for path in shipped_configs():
        f0 = initial_density(RunConfig.load(path), default_grid)
        assert observables(f0).split.rho_minus > 0
        run, _ = solve(f0, SolverConfig(UNIT, dt=0.01, t_end=20.0, record_every=1), ["l1"])
        l1 = run["l1"]
        # no transient needed in practice; rises are held to the roundoff floor
        rises = int(np.sum(np.diff(l1) > 1e-12))
        ok &= rises == 0 and l1[-1] < 1e-2
        parts.append(f"{path.stem}: L1(20)={l1[-1]:.1e}, rises>1e-12: {rises}")
    report(13, ok, "; ".join(parts))
    assert ok
