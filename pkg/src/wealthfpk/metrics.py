"""Fourier-based metrics, Sobolev seminorms, Hellinger and Jensen-Shannon functionals.

Characteristic functions of cell-averaged densities are computed exactly per cell::

    f_hat(xi) = sum_i f_i w_i exp(-i xi c_i) sinc(xi w_i / 2)

on a symmetric log-spaced frequency grid, so the oscillation is handled in
closed form and small frequencies are resolved.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy import integrate

from .grid import DensityOnGrid, Grid, GridMismatch, project_equilibrium
from .model import ModelParams, equilibrium_mode, equilibrium_pdf

XI_MIN = 1e-4
XI_MAX = 1e3
N_XI = 4096
LOG_FLOOR = 1e-300
MOMENT_RTOL = 1e-6
_CHUNK = 256


class NotIntegrable(ValueError):
    pass


class CharacteristicFunction:
    """Samples of ``f_hat`` on ``-xi_pos[::-1] ++ xi_pos``.

    ``vanishing_order`` is ``q`` such that ``|f_hat(xi)| = O(|xi|^q)`` near 0:
    0 for a density, 2 for a difference of densities with equal mass and mean.
    """

    __slots__ = ("xi_pos", "pos_values", "vanishing_order", "mass", "mean", "l1_bound")

    def __init__(self, xi_pos, pos_values, vanishing_order=0, mass=None, mean=None, l1_bound=None):
        self.xi_pos = np.asarray(xi_pos, dtype=float)
        self.pos_values = np.asarray(pos_values, dtype=complex)
        self.vanishing_order = int(vanishing_order)
        self.mass = mass
        self.mean = mean
        self.l1_bound = l1_bound

    @property
    def xi_grid(self) -> np.ndarray:
        return np.concatenate([-self.xi_pos[::-1], self.xi_pos])

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([np.conj(self.pos_values[::-1]), self.pos_values])

    def same_grid(self, other: "CharacteristicFunction") -> bool:
        return self.xi_pos.shape == other.xi_pos.shape and np.array_equal(self.xi_pos, other.xi_pos)

    def __sub__(self, other: "CharacteristicFunction") -> "CharacteristicFunction":
        if not self.same_grid(other):
            raise GridMismatch("characteristic functions sampled on different frequency grids")
        q = 0
        if self.mass is not None and other.mass is not None:
            scale = max(abs(self.mass), abs(other.mass), 1e-300)
            if abs(self.mass - other.mass) <= MOMENT_RTOL * scale:
                q = 1
                if abs(self.mean - other.mean) <= MOMENT_RTOL * max(abs(self.mean), abs(other.mean), 1.0):
                    q = 2
        bound = None
        if self.l1_bound is not None and other.l1_bound is not None:
            bound = self.l1_bound + other.l1_bound
        return CharacteristicFunction(self.xi_pos, self.pos_values - other.pos_values, q, None, None, bound)


def frequency_grid(xi_min: float = XI_MIN, xi_max: float = XI_MAX, n_xi: int = N_XI) -> np.ndarray:
    if not 0 < xi_min < xi_max:
        raise ValueError("need 0 < xi_min < xi_max")
    if n_xi < 2:
        raise ValueError("n_xi must be >= 2")
    return np.geomspace(xi_min, xi_max, n_xi)


def _transform(grid: Grid, weights: np.ndarray, xi: np.ndarray) -> np.ndarray:
    # weights are f_i w_i; fixed-order chunked summation keeps results reproducible
    c = grid.centers
    half = 0.5 * grid.widths
    keep = weights != 0
    c, half, weights = c[keep], half[keep], weights[keep]
    out = np.empty(xi.size, dtype=complex)
    for start in range(0, xi.size, _CHUNK):
        x = xi[start : start + _CHUNK, None]
        phase = np.exp(-1j * x * c[None, :])
        damp = np.sinc(x * half[None, :] / np.pi)
        out[start : start + _CHUNK] = (phase * damp) @ weights
    return out


def characteristic_function(
    f: DensityOnGrid, xi_min: float = XI_MIN, xi_max: float = XI_MAX, n_xi: int = N_XI
) -> CharacteristicFunction:
    xi = frequency_grid(xi_min, xi_max, n_xi)
    vals = np.asarray(f.values)
    weights = vals * f.grid.widths
    mass = float(weights.sum())
    mean = float(np.dot(weights, f.grid.centers))
    return CharacteristicFunction(xi, _transform(f.grid, weights, xi), 0, mass, mean, mass)


def difference_transform(
    f: DensityOnGrid,
    g: DensityOnGrid,
    xi_min: float = XI_MIN,
    xi_max: float = XI_MAX,
    n_xi: int = N_XI,
) -> CharacteristicFunction:
    """Transform of ``f - g`` computed from the cellwise difference (no cancellation)."""
    if not f.grid.same_as(g.grid):
        raise GridMismatch("densities live on different grids")
    xi = frequency_grid(xi_min, xi_max, n_xi)
    diff = (np.asarray(f.values) - np.asarray(g.values)) * f.grid.widths
    fm, gm = f.mass, g.mass
    c = f.grid.centers
    q = 0
    if abs(fm - gm) <= MOMENT_RTOL * max(fm, gm, 1e-300):
        q = 1
        fmean = float(np.dot(np.asarray(f.values) * f.grid.widths, c))
        gmean = float(np.dot(np.asarray(g.values) * g.grid.widths, c))
        if abs(fmean - gmean) <= MOMENT_RTOL * max(abs(fmean), abs(gmean), 1.0):
            q = 2
    return CharacteristicFunction(xi, _transform(f.grid, diff, xi), q, None, None, float(np.abs(diff).sum()))


@dataclass(frozen=True)
class MetricResult:
    value: float
    s: float
    p: float
    quadrature_error_estimate: float
    boundary_sup: bool = False

    def __float__(self) -> float:
        return self.value


def _delta(phi, psi) -> CharacteristicFunction:
    if psi is None:
        return phi
    if not phi.same_grid(psi):
        raise GridMismatch("characteristic functions sampled on different frequency grids")
    return phi - psi


def ds_metric(phi: CharacteristicFunction, psi: CharacteristicFunction | None, s: float) -> MetricResult:
    """``sup |phi - psi| / |xi|^s`` over the samples.

    The sup is flagged unreliable when it sits at ``xi_min`` or ``xi_max``.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    d = _delta(phi, psi)
    ratio = np.abs(d.pos_values) / d.xi_pos**s
    k = int(np.argmax(ratio))
    value = float(ratio[k])
    at_edge = value > 0 and k in (0, ratio.size - 1)
    return MetricResult(value, s, math.inf, 0.0, boundary_sup=at_edge)


def _check_integrable(q: int, weight_power: float, what: str) -> None:
    # integrand ~ xi^(weight_power + 2q) * ... near 0 must beat 1/xi
    if weight_power + q <= 0:
        raise NotIntegrable(
            f"{what}: |xi|^{weight_power:g} singularity is not integrable at 0 when the transform "
            f"vanishes only to order {q} (equal mass and mean give order 2)"
        )


def dsp_metric(
    phi: CharacteristicFunction,
    psi: CharacteristicFunction | None,
    s: float,
    p: float,
    matched_moments: int | None = None,
) -> MetricResult:
    """``(int |phi - psi|^p |xi|^{-(ps+1)} dxi)^{1/p}`` over the whole line.

    Trapezoid rule in ``log xi`` on the positive half, doubled by symmetry.
    The error estimate adds the region below ``xi_min`` (assuming ``|delta|``
    grows like ``xi^q`` there) and the tail above ``xi_max`` (modulus bound).
    ``matched_moments`` overrides the order inferred from the inputs: equal
    moments up to order ``k`` give ``q = k + 1``.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if s <= 0:
        raise ValueError("s must be positive")
    d = _delta(phi, psi)
    q = d.vanishing_order if matched_moments is None else matched_moments + 1
    if s >= q:
        raise NotIntegrable(
            f"D_(s,p) with s={s:g} needs the transforms to agree to order > {s:g} at 0; "
            f"moments match only up to order {q - 1} (require s < {q})"
        )
    xi = d.xi_pos
    a = np.abs(d.pos_values) ** p
    integrand = a * xi ** (-p * s)  # times xi for d(log xi)
    total = 2.0 * float(integrate.trapezoid(integrand, np.log(xi)))
    lo = 2.0 * float(a[0] * xi[0] ** (-p * s) / (p * q - p * s))
    bound = 2.0 if d.l1_bound is None else d.l1_bound
    hi = 2.0 * bound**p * xi[-1] ** (-p * s) / (p * s)
    value = total ** (1.0 / p)
    err = (total + lo + hi) ** (1.0 / p) - value
    return MetricResult(value, s, p, float(err))


def sobolev_norm(
    f: DensityOnGrid | CharacteristicFunction,
    order_r: float,
    xi_min: float = XI_MIN,
    xi_max: float = XI_MAX,
    n_xi: int = N_XI,
) -> float:
    """Squared homogeneous Sobolev seminorm ``int |xi|^{2r} |f_hat|^2 dxi``.

    Accepts a density or a (difference) characteristic function.
    """
    cf = f if isinstance(f, CharacteristicFunction) else characteristic_function(f, xi_min, xi_max, n_xi)
    if not np.any(cf.pos_values):
        return 0.0
    _check_integrable(2 * cf.vanishing_order, 2.0 * order_r + 1.0, "Sobolev seminorm")
    xi = cf.xi_pos
    integrand = np.abs(cf.pos_values) ** 2 * xi ** (2.0 * order_r + 1.0)
    return 2.0 * float(integrate.trapezoid(integrand, np.log(xi)))


def _same(f: DensityOnGrid, g: DensityOnGrid) -> None:
    if not f.grid.same_as(g.grid):
        raise GridMismatch("densities live on different grids")


def hellinger(f: DensityOnGrid, g: DensityOnGrid, alpha: float = 0.0) -> float:
    """alpha-Hellinger distance between ``f`` and ``alpha f + (1 - alpha) g``; plain at 0."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    _same(f, g)
    fv = np.asarray(f.values)
    mix = alpha * fv + (1.0 - alpha) * np.asarray(g.values)
    return float(math.sqrt(np.dot((np.sqrt(fv) - np.sqrt(mix)) ** 2, f.grid.widths)))


def bhattacharyya(f: DensityOnGrid, g: DensityOnGrid) -> float:
    _same(f, g)
    return float(np.dot(np.sqrt(np.asarray(f.values) * np.asarray(g.values)), f.grid.widths))


def jensen_shannon(f: DensityOnGrid, g_target: DensityOnGrid, alpha: float) -> float:
    """``sum f log(f / (alpha f + (1 - alpha) g)) w`` with ``0 log 0 = 0``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    _same(f, g_target)
    fv = np.asarray(f.values)
    mix = alpha * fv + (1.0 - alpha) * np.asarray(g_target.values)
    m = fv > LOG_FLOOR
    return float(np.dot(fv[m] * np.log(fv[m] / mix[m]), f.grid.widths[m]))


def relative_entropy(f: DensityOnGrid, g: DensityOnGrid) -> float:
    """Relative Shannon entropy; ``inf`` when ``f`` charges cells where ``g`` vanishes."""
    _same(f, g)
    fv, gv = np.asarray(f.values), np.asarray(g.values)
    m = fv > LOG_FLOOR
    if np.any(gv[m] <= 0):
        return math.inf
    return float(np.dot(fv[m] * np.log(fv[m] / gv[m]), f.grid.widths[m]))


def _log_ratio_gradient(f: DensityOnGrid, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered differences of ``log(f/g)`` on the positive cells, one-sided at the ends.

    Returns the positive-cell index array and the gradient there; cells with
    ``f`` at the floor get a zero gradient.
    """
    grid = f.grid
    z = grid.zero_edge
    idx = np.arange(z, grid.n_cells)
    fv = np.asarray(f.values)[idx]
    gv = g[idx]
    c = grid.centers[idx]
    ok = (fv > LOG_FLOOR) & (gv > 0)
    log_r = np.zeros(idx.size)
    log_r[ok] = np.log(fv[ok] / gv[ok])
    grad = np.zeros(idx.size)
    if idx.size >= 2:
        grad[1:-1] = (log_r[2:] - log_r[:-2]) / (c[2:] - c[:-2])
        grad[0] = (log_r[1] - log_r[0]) / (c[1] - c[0])
        grad[-1] = (log_r[-1] - log_r[-2]) / (c[-1] - c[-2])
    grad[~ok] = 0.0
    # a neighbour at the floor makes the difference meaningless
    if idx.size >= 2:
        bad = ~ok
        near = bad.copy()
        near[1:] |= bad[:-1]
        near[:-1] |= bad[1:]
        grad[near] = 0.0
    return idx, grad


def _mixture(f: DensityOnGrid, alpha: float, target: DensityOnGrid) -> np.ndarray:
    return alpha * np.asarray(f.values) + (1.0 - alpha) * np.asarray(target.values)


@dataclass(frozen=True)
class Production:
    production: float
    boundary_density: float


def entropy_production_js(
    f: DensityOnGrid, params: ModelParams, alpha: float, target: DensityOnGrid | None = None
) -> Production:
    """Dissipation of ``H_alpha(f, f_inf)``: ``(sigma/2) sum_{v>0} v^2 f (d log(f/g))^2 w``.

    Also returns ``f(0)`` interpolated from the two cells next to ``v = 0``.
    """
    from .solver import boundary_density

    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    target = project_equilibrium(params, f.grid) if target is None else target
    _same(f, target)
    g = _mixture(f, alpha, target)
    idx, grad = _log_ratio_gradient(f, g)
    c = f.grid.centers[idx]
    fv = np.asarray(f.values)[idx]
    val = 0.5 * params.sigma * float(np.dot(c**2 * fv * grad**2, f.grid.widths[idx]))
    return Production(val, boundary_density(f))


def entropy_production_hellinger(
    f: DensityOnGrid, params: ModelParams, alpha: float, target: DensityOnGrid | None = None
) -> float:
    """Dissipation of ``d_{H,alpha}(f, f_inf)^2``: ``(sigma/4) sum_{v>0} v^2 sqrt(f g) (d log(f/g))^2 w``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    target = project_equilibrium(params, f.grid) if target is None else target
    _same(f, target)
    g = _mixture(f, alpha, target)
    idx, grad = _log_ratio_gradient(f, g)
    c = f.grid.centers[idx]
    root = np.sqrt(np.asarray(f.values)[idx] * g[idx])
    return 0.25 * params.sigma * float(np.dot(c**2 * root * grad**2, f.grid.widths[idx]))


@dataclass(frozen=True)
class ChernoffResult:
    variance: float
    bound: float
    affine: bool

    def holds(self, rtol: float = 1e-8) -> bool:
        return self.variance <= self.bound * (1.0 + rtol) + 1e-14

    def __iter__(self):
        return iter((self.variance, self.bound))


def _expect(params: ModelParams, fn: Callable, limit: int) -> float:
    mode = equilibrium_mode(params).mode_location

    def integrand(v: float) -> float:
        return fn(v) * equilibrium_pdf(params, v)

    a, _ = integrate.quad(integrand, 0.0, mode, epsabs=1e-15, epsrel=1e-12, limit=limit)
    b, _ = integrate.quad(integrand, mode, 10.0 * mode, epsabs=1e-15, epsrel=1e-12, limit=limit)
    c, _ = integrate.quad(integrand, 10.0 * mode, np.inf, epsabs=1e-15, epsrel=1e-12, limit=limit)
    return a + b + c


def _growth_order(fn: Callable) -> float:
    big = np.array([1e6, 1e9])
    vals = np.abs([fn(x) for x in big])
    if np.any(vals == 0) or not np.all(np.isfinite(vals)):
        return 0.0 if np.all(np.isfinite(vals)) else math.inf
    return float(np.log(vals[1] / vals[0]) / np.log(big[1] / big[0]))


def _derivative(fn: Callable) -> Callable:
    def dfn(v: float) -> float:
        h = 1e-5 * max(1.0, abs(v))
        return (fn(v + h) - fn(v - h)) / (2.0 * h)

    return dfn


def chernoff_check(
    params: ModelParams,
    phi: Callable[[float], float],
    n_quad: int = 200,
    dphi: Callable[[float], float] | None = None,
    growth: float | None = None,
) -> ChernoffResult:
    """``Var[phi(X)]`` and ``E[kappa(X) phi'(X)^2]`` for ``X ~ f_inf``, ``kappa = sigma/(2 lam) v^2``.

    ``growth`` is the power-law growth of ``|phi|`` at infinity; it is
    estimated when omitted. The variance diverges when ``2 * growth >= mu``.
    """
    mu = params.mu
    order = _growth_order(phi) if growth is None else growth
    if 2.0 * order >= mu - 1e-6:
        raise NotIntegrable(
            f"Var[phi(X)] diverges: phi grows like v^{order:.3g} and moments exist only below order {mu:g}"
        )
    dphi = _derivative(phi) if dphi is None else dphi
    kappa = params.sigma / (2.0 * params.lam)
    m1 = _expect(params, phi, n_quad)
    m2 = _expect(params, lambda v: phi(v) ** 2, n_quad)
    var = max(m2 - m1 * m1, 0.0)
    # recentred second moment is better conditioned when phi has a large mean
    var = _expect(params, lambda v: (phi(v) - m1) ** 2, n_quad) if var > 0 else var
    bound = kappa * _expect(params, lambda v: v * v * dphi(v) ** 2, n_quad)
    probe = np.array([0.3, 1.0, 2.5, 7.0])
    pv = np.array([phi(x) for x in probe])
    slope = (pv[-1] - pv[0]) / (probe[-1] - probe[0])
    affine = bool(np.allclose(pv, pv[0] + slope * (probe - probe[0]), rtol=1e-10, atol=1e-12))
    return ChernoffResult(var, bound, affine)


METRIC_CSV_HEADER = ("t", "metric_name", "s", "p", "alpha", "value", "error_estimate")


def write_metric_csv(rows: Iterable[dict], path) -> None:
    """Rows with keys of ``METRIC_CSV_HEADER``; missing parameters are left blank."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_CSV_HEADER)
        for r in rows:
            w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_CSV_HEADER])

