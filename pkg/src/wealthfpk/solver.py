"""Conservative, positivity-preserving finite-volume solver for the wealth FP equation.

The equation is integrated in flux form ``df/dt = dF/dv`` with
``F = (sigma/2) v^2 df/dv + (sigma v + lam (v - 1)) f`` and zero flux at both
truncation boundaries. Edge fluxes are two-point, ``F_j = a_j f_j - b_j f_{j-1}``
with ``a_j, b_j >= 0``:

* between two cells with ``v > 0`` the weights are exponentially fitted to the
  projected equilibrium ``e`` (Chang-Cooper / Scharfetter-Gummel style), so ``e``
  is an exact discrete steady state; the common factor is the discrete analogue
  of ``D e = lam * int_0^v (1 - u) e(u) du`` so the first moment obeys
  ``dm/dt = lam (mass - m)`` exactly;
* on ``v <= 0`` the downstream weight is the local Scharfetter-Gummel one and the
  upstream weight follows from the same first-moment identity. At the edge
  ``v = 0`` the diffusion vanishes and the flux reduces to upwinded advection,
  so nothing crosses from ``v > 0`` into ``v < 0``.

The resulting implicit matrix is a column-diagonally-dominant M-matrix; its
tridiagonal LU needs no pivoting and the solve only adds nonnegative terms,
so nonnegativity holds exactly in floating point for ``theta = 1``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.linalg import lapack

from .grid import DensityOnGrid, Grid, equilibrium_log_cell_averages, observables
from .model import ModelParams

UNIT_TOL = 1e-6


class SolverError(RuntimeError):
    pass


class InvariantViolation(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    params: ModelParams
    dt: float = 1e-2
    t_end: float = 1.0
    theta: float = 1.0
    record_every: int = 10

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be nonnegative")
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0.5, 1]")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass(frozen=True)
class FluxCoefficients:
    """Continuous coefficients at the cell edges and the discrete edge weights."""

    diffusion: np.ndarray  # sigma v^2 / 2 at all edges
    advection: np.ndarray  # sigma v + lam (v - 1) at all edges
    right_weight: np.ndarray  # a_j for interior edges j = 1..N-1
    left_weight: np.ndarray  # b_j

    @classmethod
    def build(cls, grid: Grid, params: ModelParams) -> "FluxCoefficients":
        return _flux_coefficients(grid, params)


def bernoulli(x):
    """``x / (exp(x) - 1)`` with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    with np.errstate(over="ignore"):
        out[nz] = x[nz] / np.expm1(x[nz])
    return out


@lru_cache(maxsize=16)
def _cached_coefficients(edges_bytes: bytes, lam: float, sigma: float) -> FluxCoefficients:
    grid = Grid(np.frombuffer(edges_bytes))
    return _build_coefficients(grid, ModelParams(lam, sigma))


def _flux_coefficients(grid: Grid, params: ModelParams) -> FluxCoefficients:
    return _cached_coefficients(grid.edges.tobytes(), params.lam, params.sigma)


def _build_coefficients(grid: Grid, params: ModelParams) -> FluxCoefficients:
    lam, sigma = params.lam, params.sigma
    v = grid.edges
    c = grid.centers
    w = grid.widths
    n = grid.n_cells
    z = grid.zero_edge
    one = grid.edge_index(1.0)

    diffusion = 0.5 * sigma * v**2
    advection = sigma * v + lam * (v - 1.0)
    h = np.diff(c)  # h[j-1] is the center spacing across interior edge j
    a = np.zeros(n + 1)
    b = np.zeros(n + 1)

    # v <= 0: local Scharfetter-Gummel weight downstream, first-moment identity upstream
    for j in range(1, z + 1):
        d_over_h = diffusion[j] / h[j - 1]
        if d_over_h == 0.0:
            a[j] = max(advection[j], 0.0)
        else:
            a[j] = d_over_h * bernoulli(-advection[j] / d_over_h)
        upstream = lam * (1.0 - c[j - 1]) * w[j - 1] + (h[j - 2] * a[j - 1] if j >= 2 else 0.0)
        b[j] = upstream / h[j - 1]

    # v > 0: weights fitted to the projected equilibrium e
    le = equilibrium_log_cell_averages(params, grid)
    pos = np.arange(z, n)
    term = np.full(n, -np.inf)
    below = pos[c[pos] < 1.0]
    above = pos[c[pos] > 1.0]
    term[below] = np.log(lam * (1.0 - c[below]) * w[below]) + le[below]
    e = np.exp(le)
    total = lam * (np.dot(e[pos], w[pos]) - np.dot(c[pos] * e[pos], w[pos]))
    g_end = max(total, 0.0)
    log_g = np.full(n + 1, -np.inf)
    # left partial sums for edges at or below 1
    acc = np.logaddexp.accumulate(term[z:one])
    log_g[z + 1 : one + 1] = acc
    # right partial sums for edges above 1
    up = np.full(n, -np.inf)
    up[above] = np.log(lam * (c[above] - 1.0) * w[above]) + le[above]
    tail = np.logaddexp.accumulate(up[one:][::-1])[::-1]  # tail[i] = sum over cells >= one + i
    with np.errstate(divide="ignore"):
        log_g_end = math.log(g_end) if g_end > 0 else -np.inf
    log_g[one + 1 : n] = np.logaddexp(log_g_end, tail[1 : n - one])
    for j in range(z + 1, n):
        a[j] = math.exp(log_g[j] - le[j]) / h[j - 1]
        b[j] = math.exp(log_g[j] - le[j - 1]) / h[j - 1]

    return FluxCoefficients(diffusion, advection, a[1:n].copy(), b[1:n].copy())


def operator_bands(grid: Grid, params: ModelParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bands of ``W A`` where ``df/dt = A f`` and ``W = diag(widths)``.

    Returns ``(sub, diag, sup)`` with ``sub[i]`` multiplying ``f[i]`` in row
    ``i + 1`` and ``sup[i]`` multiplying ``f[i + 1]`` in row ``i``.
    """
    coef = _flux_coefficients(grid, params)
    a = coef.right_weight
    b = coef.left_weight
    n = grid.n_cells
    diag = np.zeros(n)
    diag[:-1] -= b
    diag[1:] -= a
    return b.copy(), diag, a.copy()


def apply_operator(grid: Grid, params: ModelParams, values: np.ndarray) -> np.ndarray:
    """``A f``: the semi-discrete time derivative."""
    sub, diag, sup = operator_bands(grid, params)
    out = diag * values
    out[1:] += sub * values[:-1]
    out[:-1] += sup * values[1:]
    return out / grid.widths


def edge_fluxes(grid: Grid, params: ModelParams, values: np.ndarray) -> np.ndarray:
    """Fluxes ``F_j`` at all edges (zero at the two boundaries)."""
    coef = _flux_coefficients(grid, params)
    f = np.zeros(grid.n_cells + 1)
    f[1:-1] = coef.right_weight * values[1:] - coef.left_weight * values[:-1]
    return f


def max_explicit_dt(grid: Grid, params: ModelParams) -> float:
    """Largest explicit step keeping the forward-Euler update monotone."""
    _, diag, _ = operator_bands(grid, params)
    rate = -diag / grid.widths
    return float(1.0 / rate.max())


class Stepper:
    """Theta-scheme time stepper with a prefactorized tridiagonal system."""

    def __init__(self, grid: Grid, params: ModelParams, dt: float, theta: float = 1.0) -> None:
        self.grid = grid
        self.params = params
        self.dt = dt
        self.theta = theta
        sub, diag, sup = operator_bands(grid, params)
        self._sub, self._diag, self._sup = sub, diag, sup
        w = grid.widths
        if theta < 1.0:
            limit = max_explicit_dt(grid, params) / (1.0 - theta)
            if dt > limit:
                raise SolverError(
                    f"dt={dt:g} exceeds the positivity limit {limit:.3e} for theta={theta:g}"
                )
        dl = -theta * dt * sub
        d = w - theta * dt * diag
        du = -theta * dt * sup
        dl, d, du, du2, ipiv, info = lapack.dgttrf(dl, d, du)
        if info != 0:
            raise SolverError(f"singular implicit system (dgttrf info={info})")
        if np.any(ipiv != np.arange(1, grid.n_cells + 1)):
            raise SolverError("pivoting occurred; the implicit matrix is not an M-matrix")
        self._lu = (dl, d, du, du2, ipiv)

    def rhs(self, values: np.ndarray) -> np.ndarray:
        out = self.grid.widths * values
        if self.theta < 1.0:
            k = (1.0 - self.theta) * self.dt
            out = out + k * self._diag * values
            out[1:] += k * self._sub * values[:-1]
            out[:-1] += k * self._sup * values[1:]
        return out

    def advance(self, values: np.ndarray, step_index: int = 0) -> np.ndarray:
        dl, d, du, du2, ipiv = self._lu
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, self.rhs(values))
        if info != 0:
            raise SolverError(f"tridiagonal solve failed at step {step_index} (info={info})")
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite values after step {step_index}")
        if np.any(x < 0):
            i = int(np.argmin(x))
            raise InvariantViolation(f"negative cell {i} ({x[i]:.3e}) after step {step_index}")
        return x


def step(f: DensityOnGrid, cfg: SolverConfig) -> DensityOnGrid:
    """One theta-scheme step of size ``cfg.dt``."""
    stepper = Stepper(f.grid, cfg.params, cfg.dt, cfg.theta)
    return DensityOnGrid(f.grid, stepper.advance(np.asarray(f.values)))


def boundary_density(f: DensityOnGrid) -> float:
    """Density at ``v = 0`` by linear interpolation between the adjacent cell centers."""
    return _boundary_density(f.grid, np.asarray(f.values))


def _boundary_density(grid: Grid, values: np.ndarray) -> float:
    z = grid.zero_edge
    wl, wr = grid.widths[z - 1], grid.widths[z]
    return float((values[z - 1] * wr + values[z] * wl) / (wl + wr))


OBSERVABLE_COLUMNS = ("t", "mass", "mean", "m2", "rho_minus", "rho_plus", "m_minus", "m_plus")


@dataclass
class ObservableSeries:
    """Recorded observables plus per-step boundary bookkeeping."""

    params: ModelParams
    columns: dict = field(default_factory=dict)
    step_t: np.ndarray = None  # type: ignore[assignment]
    step_boundary_density: np.ndarray = None  # type: ignore[assignment]
    step_rho_plus: np.ndarray = None  # type: ignore[assignment]
    step_mass: np.ndarray = None  # type: ignore[assignment]
    unnormalized: bool = False
    snapshots: list = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        return np.asarray(self.columns[name])

    @property
    def t(self) -> np.ndarray:
        return self["t"]

    @property
    def metric_columns(self) -> list[str]:
        return [k for k in self.columns if k not in OBSERVABLE_COLUMNS]

    def rows(self) -> list[dict]:
        names = list(OBSERVABLE_COLUMNS) + self.metric_columns
        return [{k: self.columns[k][i] for k in names} for i in range(len(self.columns["t"]))]


Monitor = Callable[[DensityOnGrid], float]


def solve(
    f0: DensityOnGrid,
    cfg: SolverConfig,
    monitors: dict[str, Monitor] | Sequence[str] | None = None,
    keep_snapshots: bool = False,
    snapshot_times: Sequence[float] = (),
) -> tuple[ObservableSeries, DensityOnGrid]:
    """Integrate to ``cfg.t_end`` recording observables every ``record_every`` steps.

    ``keep_snapshots`` stores the density at every recorded time;
    ``snapshot_times`` additionally stores it at the steps nearest those times.

    ``monitors`` maps column names to functionals of the current density, or
    lists monitor names understood by ``wealthfpk.monitors.build_monitors``.
    """
    grid = f0.grid
    if monitors is None:
        monitors = {}
    elif not isinstance(monitors, dict):
        from .monitors import build_monitors

        monitors = build_monitors(list(monitors), grid, cfg.params, mass=f0.mass if f0.mass > 0 else 1.0)
    obs0 = observables(f0)
    unnormalized = abs(obs0.mass - 1.0) > UNIT_TOL or abs(obs0.mean - 1.0) > UNIT_TOL
    if unnormalized:
        warnings.warn(
            f"initial density has mass {obs0.mass:.8g} and mean {obs0.mean:.8g}; running unnormalized",
            stacklevel=2,
        )

    series = ObservableSeries(params=cfg.params, unnormalized=unnormalized)
    cols: dict[str, list] = {k: [] for k in OBSERVABLE_COLUMNS}
    cols["m2_full"] = []
    cols["near_zero_mass"] = []
    for name in monitors:
        cols[name] = []
    z = grid.zero_edge
    w = grid.widths

    def record(t: float, values: np.ndarray) -> None:
        dens = DensityOnGrid(grid, values)
        o = observables(dens)
        cols["t"].append(t)
        for k, val in o.as_row().items():
            cols[k].append(val)
        cols["m2_full"].append(o.m2_full)
        cols["near_zero_mass"].append(float(values[z - 1] * w[z - 1] + values[z] * w[z]))
        for name, fn in monitors.items():
            cols[name].append(float(fn(dens)))
        if keep_snapshots or int(round(t / cfg.dt)) in extra_steps:
            series.snapshots.append((t, dens))

    n = cfg.n_steps
    extra_steps = {int(round(t / cfg.dt)) for t in snapshot_times}
    step_t = np.empty(n + 1)
    step_f0 = np.empty(n + 1)
    step_rho = np.empty(n + 1)
    step_mass = np.empty(n + 1)
    values = np.array(f0.values, dtype=float)

    def bookkeep(i: int, t: float) -> None:
        step_t[i] = t
        step_f0[i] = _boundary_density(grid, values)
        step_rho[i] = float(np.dot(values[z:], w[z:]))
        step_mass[i] = float(np.dot(values, w))

    bookkeep(0, 0.0)
    record(0.0, values)
    if n > 0:
        stepper = Stepper(grid, cfg.params, cfg.dt, cfg.theta)
        for i in range(1, n + 1):
            t = i * cfg.dt
            try:
                values = stepper.advance(values, i)
            except SolverError as exc:
                raise type(exc)(f"t={t:.6g}: {exc}") from exc
            bookkeep(i, t)
            if i % cfg.record_every == 0 or i == n:
                record(t, values)
            elif i in extra_steps:
                series.snapshots.append((t, DensityOnGrid(grid, values)))

    series.columns = {k: np.asarray(v) for k, v in cols.items()}
    series.step_t = step_t
    series.step_boundary_density = step_f0
    series.step_rho_plus = step_rho
    series.step_mass = step_mass
    return series, DensityOnGrid(grid, values)


@dataclass(frozen=True)
class FluxAudit:
    truncation_mass_defect: float
    boundary_integral: float
    rho_plus_gain: float
    mismatch: float

    def as_dict(self) -> dict:
        return {
            "truncation_mass_defect": self.truncation_mass_defect,
            "boundary_integral": self.boundary_integral,
            "rho_plus_gain": self.rho_plus_gain,
            "mismatch": self.mismatch,
        }


def boundary_flux_audit(run: ObservableSeries) -> FluxAudit:
    """Compare ``rho_plus(t) - rho_plus(0)`` with ``lam * int_0^t f(0, s) ds``.

    ``f(0, s)`` is interpolated from the two cells adjacent to ``v = 0`` at
    every step and integrated with the trapezoid rule.
    """
    t = run.step_t
    f0 = run.step_boundary_density
    integral = float(run.params.lam * integrate.trapezoid(f0, t)) if t.size > 1 else 0.0
    gain = float(run.step_rho_plus[-1] - run.step_rho_plus[0])
    defect = float(np.max(np.abs(run.step_mass - run.step_mass[0]))) if t.size else 0.0
    return FluxAudit(
        truncation_mass_defect=defect,
        boundary_integral=integral,
        rho_plus_gain=gain,
        mismatch=gain - integral,
    )
