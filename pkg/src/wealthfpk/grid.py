"""Finite-volume mesh on a truncated real line and cell-averaged densities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .model import ModelParams, equilibrium_log_pdf

GAUSS_NODES = 8
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GAUSS_NODES)


class GridMismatch(ValueError):
    pass


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class Grid:
    """Cell edges, centers and widths; immutable after construction."""

    __slots__ = ("edges", "centers", "widths")

    def __init__(self, edges) -> None:
        edges = _readonly(edges)
        if edges.ndim != 1 or edges.size < 3:
            raise ValueError("a grid needs at least two cells")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("grid edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "centers", _readonly(0.5 * (edges[1:] + edges[:-1])))
        object.__setattr__(self, "widths", _readonly(np.diff(edges)))

    def __setattr__(self, name, value):
        raise AttributeError("Grid is immutable")

    def __repr__(self) -> str:
        return f"Grid(n_cells={self.n_cells}, v_min={self.v_min:g}, v_max={self.v_max:g})"

    @property
    def v_min(self) -> float:
        return float(self.edges[0])

    @property
    def v_max(self) -> float:
        return float(self.edges[-1])

    @property
    def n_cells(self) -> int:
        return self.edges.size - 1

    def edge_index(self, v: float) -> int:
        """Index ``j`` with ``edges[j] == v`` exactly."""
        hits = np.flatnonzero(self.edges == v)
        if hits.size != 1:
            raise ValueError(f"{v} is not a grid edge")
        return int(hits[0])

    @property
    def zero_edge(self) -> int:
        return self.edge_index(0.0)

    def same_as(self, other: "Grid") -> bool:
        return self is other or (
            self.edges.shape == other.edges.shape and bool(np.array_equal(self.edges, other.edges))
        )

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Grid) and self.same_as(other)

    def __hash__(self) -> int:
        return hash(self.edges.tobytes())


def _uniform_segments(v_min: float, v_max: float, n_cells: int) -> np.ndarray:
    length = v_max - v_min
    n_neg = max(1, round(n_cells * -v_min / length))
    n_mid = max(1, round(n_cells / length))
    n_pos = n_cells - n_neg - n_mid
    if n_pos < 1:
        raise ValueError("too few cells to place edges at 0 and 1")
    return np.concatenate(
        [
            np.linspace(v_min, 0.0, n_neg + 1)[:-1],
            np.linspace(0.0, 1.0, n_mid + 1)[:-1],
            np.linspace(1.0, v_max, n_pos + 1),
        ]
    )


def _positive_side(v_max: float, n_pos: int, stretch: float) -> tuple[np.ndarray, float]:
    """Edges ``A sinh(beta j)``, j = 0..n_pos, with 1 and v_max hit exactly."""
    beta0 = math.acosh(stretch) / n_pos
    a0 = v_max / math.sinh(beta0 * n_pos)
    k = min(max(1, round(math.asinh(1.0 / a0) / beta0)), n_pos - 1)
    # sinh(beta n)/sinh(beta k) runs from n/k (beta -> 0) to infinity
    while v_max <= n_pos / k * (1.0 + 1e-9):
        k += 1
        if k >= n_pos:
            raise ValueError("cannot stretch the positive side with this cell count")

    def ratio(beta: float) -> float:
        return (beta * (n_pos - k) + math.log1p(-math.exp(-2 * beta * n_pos))
                - math.log1p(-math.exp(-2 * beta * k)) - math.log(v_max))

    hi = 1.0 / k
    while ratio(hi) < 0:
        hi *= 2.0
    beta = brentq(ratio, 1e-12 / n_pos, hi, xtol=1e-15, rtol=1e-15)
    amp = 1.0 / math.sinh(beta * k)
    edges = amp * np.sinh(beta * np.arange(n_pos + 1))
    edges[k] = 1.0
    edges[-1] = v_max
    return edges, amp * beta


def _negative_side(v_min: float, n_neg: int, h0: float) -> np.ndarray | None:
    """Edges ``-(h0/beta) sinh(beta j)`` reaching v_min, or None if n_neg is too large."""
    span = -v_min
    if h0 * n_neg >= span:
        return None

    def excess(beta: float) -> float:
        return math.log(h0 / beta) + beta * n_neg + math.log1p(-math.exp(-2 * beta * n_neg)) - math.log(2 * span)

    hi = 1.0 / n_neg
    while excess(hi) < 0:
        hi *= 2.0
    beta = brentq(excess, 1e-12 / n_neg, hi, xtol=1e-15, rtol=1e-15)
    edges = -(h0 / beta) * np.sinh(beta * np.arange(n_neg + 1))
    edges[-1] = v_min
    return edges[::-1]


def build_grid(v_min: float, v_max: float, n_cells: int, stretch: float = 1.0) -> Grid:
    """Mesh on ``[v_min, v_max]`` with edges at 0 and 1.

    ``stretch`` is the ratio between the widest and the finest cell on the
    positive side. Cells are finest at 0 and grow like ``cosh`` away from it
    (sinh-mapped coordinates); ``stretch == 1`` gives uniform segments.
    """
    if not (v_min < 0.0 < 1.0 < v_max):
        raise ValueError(f"need v_min < 0 < 1 < v_max, got [{v_min}, {v_max}]")
    if n_cells < 3:
        raise ValueError("n_cells too small to place edges at 0 and 1")
    if stretch < 1:
        raise ValueError("stretch must be >= 1")
    if stretch == 1:
        return Grid(_uniform_segments(v_min, v_max, n_cells))

    n_pos = max(2, round(n_cells * v_max / (v_max - v_min)))
    for _ in range(50):
        pos, h0 = _positive_side(v_max, n_pos, stretch)
        # cells the mirrored positive map would need to reach |v_min|
        amp = h0 / (math.acosh(stretch) / n_pos)
        want = max(1, min(n_cells - 2, math.ceil(math.asinh(-v_min / amp) * n_pos / math.acosh(stretch))))
        if want == n_cells - n_pos:
            break
        n_pos = n_cells - want
    n_neg = n_cells - n_pos
    pos, h0 = _positive_side(v_max, n_pos, stretch)
    neg = _negative_side(v_min, n_neg, h0)
    while neg is None:
        n_neg -= 1
        n_pos += 1
        if n_neg < 1:
            raise ValueError("cannot place cells on the negative side")
        pos, h0 = _positive_side(v_max, n_pos, stretch)
        neg = _negative_side(v_min, n_neg, h0)
    return Grid(np.concatenate([neg[:-1], pos]))


@dataclass(frozen=True, eq=False)
class DensityOnGrid:
    """Cell averages of a nonnegative density (units 1/wealth)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = _readonly(self.values)
        if values.shape != (self.grid.n_cells,):
            raise ValueError(f"expected {self.grid.n_cells} cell values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite")
        if np.any(values < 0):
            raise ValueError(f"negative density value {values.min():.3e}")
        object.__setattr__(self, "values", values)

    @property
    def mass(self) -> float:
        return float(np.dot(self.values, self.grid.widths))

    def scaled(self, factor: float) -> "DensityOnGrid":
        return DensityOnGrid(self.grid, self.values * factor)

    def normalized(self) -> "DensityOnGrid":
        m = self.mass
        if m <= 0:
            raise ValueError("cannot normalize a zero density")
        return self.scaled(1.0 / m)


def _nodes(grid: Grid) -> np.ndarray:
    half = 0.5 * grid.widths
    return grid.centers[:, None] + half[:, None] * _GL_X[None, :]


def project(density_fn: Callable, grid: Grid) -> DensityOnGrid:
    """Cell averages by per-cell Gauss-Legendre quadrature."""
    x = _nodes(grid)
    vals = np.asarray(density_fn(x), dtype=float)
    if vals.shape != x.shape:
        vals = np.vectorize(density_fn, otypes=[float])(x)
    if not np.all(np.isfinite(vals)):
        raise ValueError("density function returned non-finite values")
    if np.any(vals < 0):
        raise ValueError("density function returned negative values")
    return DensityOnGrid(grid, 0.5 * vals @ _GL_W)


def log_cell_averages(log_density_fn: Callable, grid: Grid) -> np.ndarray:
    """Log of cell averages of ``exp(log_density_fn)``, robust to underflow."""
    x = _nodes(grid)
    logv = np.asarray(log_density_fn(x), dtype=float)
    top = np.max(logv, axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    s = (np.exp(logv - safe[:, None]) * (0.5 * _GL_W)).sum(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(top), safe + np.log(s), -np.inf)


def project_equilibrium(params: ModelParams, grid: Grid) -> DensityOnGrid:
    """Projected equilibrium; identical to ``project(equilibrium_pdf)`` up to rounding."""
    return DensityOnGrid(grid, np.exp(equilibrium_log_cell_averages(params, grid)))


def equilibrium_log_cell_averages(params: ModelParams, grid: Grid) -> np.ndarray:
    return log_cell_averages(lambda x: equilibrium_log_pdf(params, x), grid)


@dataclass(frozen=True)
class MassMeanSplit:
    rho_minus: float
    rho_plus: float
    m_minus: float
    m_plus: float


@dataclass(frozen=True)
class Observables:
    mass: float
    mean: float
    m2: float
    m2_full: float
    split: MassMeanSplit

    def as_row(self) -> dict:
        return {
            "mass": self.mass,
            "mean": self.mean,
            "m2": self.m2,
            "rho_minus": self.split.rho_minus,
            "rho_plus": self.split.rho_plus,
            "m_minus": self.split.m_minus,
            "m_plus": self.split.m_plus,
        }


def observables(f: DensityOnGrid) -> Observables:
    """Mass, mean, second moments and the split at the edge placed at 0.

    ``m2`` is the second moment over ``v > 0`` only; ``m2_full`` covers the
    whole line.
    """
    g = f.grid
    k = g.zero_edge
    cell_mass = f.values * g.widths
    first = g.centers * cell_mass
    second = g.centers * first
    rho_minus = float(cell_mass[:k].sum())
    rho_plus = float(cell_mass[k:].sum())
    m_minus = float(first[:k].sum())
    m_plus = float(first[k:].sum())
    return Observables(
        mass=rho_minus + rho_plus,
        mean=m_minus + m_plus,
        m2=float(second[k:].sum()),
        m2_full=float(second.sum()),
        split=MassMeanSplit(rho_minus, rho_plus, m_minus, m_plus),
    )


def _check_same(f: DensityOnGrid, g: DensityOnGrid) -> None:
    if not f.grid.same_as(g.grid):
        raise GridMismatch("densities live on different grids")


def l1_distance(f: DensityOnGrid, g: DensityOnGrid) -> float:
    _check_same(f, g)
    return float(np.dot(np.abs(f.values - g.values), f.grid.widths))


def write_density_csv(f: DensityOnGrid, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["v_center", "width", "f"])
        for c, h, v in zip(f.grid.centers, f.grid.widths, f.values):
            w.writerow([f"{c:.17g}", f"{h:.17g}", f"{v:.17g}"])


def read_density_csv(path, grid: Grid | None = None) -> DensityOnGrid:
    """Inverse of ``write_density_csv``.

    Values round-trip bit-exactly. Pass the originating ``grid`` to reuse it
    (its centers and widths are checked); otherwise edges are rebuilt from
    the stored centers and widths.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"density CSV not found: {path}")
    centers, widths, values = [], [], []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if (reader.fieldnames or [])[:3] != ["v_center", "width", "f"]:
            raise ValueError(f"{path}: expected header starting v_center,width,f")
        for row in reader:
            centers.append(float(row["v_center"]))
            widths.append(float(row["width"]))
            values.append(float(row["f"]))
    c = np.array(centers)
    h = np.array(widths)
    if grid is not None:
        if not (np.array_equal(c, grid.centers) and np.array_equal(h, grid.widths)):
            raise GridMismatch(f"{path} does not match the supplied grid")
        return DensityOnGrid(grid, np.array(values))
    edges = np.empty(c.size + 1)
    edges[:-1] = c - 0.5 * h
    edges[-1] = c[-1] + 0.5 * h[-1]
    # snap to exact edges recovered from neighbouring cells
    edges[1:-1] = 0.5 * ((c[:-1] + 0.5 * h[:-1]) + (c[1:] - 0.5 * h[1:]))
    for special_edge in (0.0, 1.0):
        j = int(np.argmin(np.abs(edges - special_edge)))
        if abs(edges[j] - special_edge) < 1e-12 * max(1.0, abs(h).max()):
            edges[j] = special_edge
    return DensityOnGrid(Grid(edges), np.array(values))


def remap(f: DensityOnGrid, grid: Grid) -> DensityOnGrid:
    """Conservative transfer of a piecewise-constant density onto another grid.

    The cumulative mass is piecewise linear in ``v``; sampling it at the new
    edges gives exact overlap integrals. Mass outside the new grid is dropped.
    """
    if f.grid.same_as(grid):
        return f
    cum = np.concatenate([[0.0], np.cumsum(f.values * f.grid.widths)])
    at = np.interp(grid.edges, f.grid.edges, cum)
    cell = np.maximum(np.diff(at), 0.0)
    return DensityOnGrid(grid, cell / grid.widths)
