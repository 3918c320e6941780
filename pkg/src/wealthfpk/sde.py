"""Euler-Maruyama ensembles for ``dV = -lam (V - 1) dt + sqrt(sigma) V dW``.

Particles are split into fixed-size chunks by index; chunk ``k`` draws from
its own stream spawned from ``SeedSequence(seed)``, so results do not depend
on how many threads process the chunks.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import DensityOnGrid, Grid
from .model import ModelParams, equilibrium_ppf

CHUNK = 100_000

Sampler = Callable[[np.random.Generator, int], np.ndarray]


class EnsembleError(RuntimeError):
    pass


@dataclass
class EnsembleState:
    particles: np.ndarray
    t: float
    rng_seed: int
    chunk_size: int = CHUNK
    snapshots: dict = field(default_factory=dict)  # time -> particle array

    def __post_init__(self) -> None:
        if self.particles.size < 1:
            raise ValueError("an ensemble needs at least one particle")
        if not np.all(np.isfinite(self.particles)):
            raise EnsembleError("non-finite particle in ensemble state")

    @property
    def n(self) -> int:
        return int(self.particles.size)

    def chunks(self, values: np.ndarray | None = None) -> list[np.ndarray]:
        """Views of the independent per-stream sub-ensembles."""
        v = self.particles if values is None else values
        return [v[i : i + self.chunk_size] for i in range(0, v.size, self.chunk_size)]


def point_mass(x: float) -> Sampler:
    return lambda rng, n: np.full(n, float(x))


def gaussian(mean: float, sd: float) -> Sampler:
    return lambda rng, n: rng.normal(mean, sd, n)


def box(a: float, b: float) -> Sampler:
    return lambda rng, n: rng.uniform(a, b, n)


def mixture(weights: Sequence[float], samplers: Sequence[Sampler]) -> Sampler:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()

    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        which = rng.choice(len(samplers), size=n, p=w)
        out = np.empty(n)
        for k, s in enumerate(samplers):
            m = which == k
            out[m] = s(rng, int(m.sum()))
        return out

    return draw


def equilibrium_sampler(params: ModelParams) -> Sampler:
    """Inverse-CDF draws from the inverse-Gamma equilibrium."""
    return lambda rng, n: equilibrium_ppf(params, rng.uniform(size=n))


def density_sampler(f: DensityOnGrid) -> Sampler:
    """Draws from a piecewise-constant density: pick a cell by mass, then uniform inside."""
    w = np.asarray(f.values) * f.grid.widths
    if w.sum() <= 0:
        raise ValueError("cannot sample a zero density")
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    edges = f.grid.edges

    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        k = np.searchsorted(cdf, rng.uniform(size=n), side="right")
        k = np.minimum(k, cdf.size - 1)
        return edges[k] + rng.uniform(size=n) * (edges[k + 1] - edges[k])

    return draw


def _threads() -> int:
    raw = os.environ.get("WEALTHFPK_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def _run_chunk(
    params: ModelParams,
    sampler: Sampler,
    n: int,
    dt: float,
    n_steps: int,
    seq: np.random.SeedSequence,
    record_steps: dict[int, float],
    offset: int,
) -> tuple[np.ndarray, dict]:
    rng = np.random.Generator(np.random.PCG64(seq))
    v = np.asarray(sampler(rng, n), dtype=float).copy()
    if v.shape != (n,):
        raise ValueError(f"sampler returned shape {v.shape}, expected ({n},)")
    snaps = {}
    if 0 in record_steps:
        snaps[record_steps[0]] = v.copy()
    drift = params.lam * dt
    noise = math.sqrt(params.sigma * dt)
    z = np.empty(n)
    for k in range(1, n_steps + 1):
        # V <- V (1 - lam dt + sqrt(sigma dt) Z) + lam dt, noise at the pre-step position
        rng.standard_normal(out=z)
        z *= noise
        z += 1.0 - drift
        v *= z
        v += drift
        if k in record_steps:
            _check_finite(v, offset, k * dt)
            snaps[record_steps[k]] = v.copy()
        elif k % 100 == 0:
            _check_finite(v, offset, k * dt)
    _check_finite(v, offset, n_steps * dt)
    return v, snaps


def _check_finite(v: np.ndarray, offset: int, t: float) -> None:
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise EnsembleError(
            f"particle {offset + bad} became non-finite by t={t:.6g}; "
            f"largest finite |v| in its chunk is {np.nanmax(np.abs(v[np.isfinite(v)]), initial=0):.3e}"
        )


def simulate(
    params: ModelParams,
    sampler: Sampler,
    n: int,
    dt: float,
    t_end: float,
    seed: int,
    record_times: Sequence[float] = (),
    chunk_size: int = CHUNK,
) -> EnsembleState:
    """Evolve ``n`` particles to ``t_end``; optional snapshots at ``record_times``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not dt > 0 or t_end < 0:
        raise ValueError("need dt > 0 and t_end >= 0")
    if params.lam * dt >= 0.1 or params.sigma * dt >= 0.1:
        raise ValueError("time step too large: need lam*dt < 0.1 and sigma*dt < 0.1")
    n_steps = int(round(t_end / dt))
    record_steps = {}
    for t in record_times:
        k = int(round(t / dt))
        if not 0 <= k <= n_steps or abs(k * dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"record time {t} is not a step multiple within [0, t_end]")
        record_steps[k] = float(t)
    sizes = [min(chunk_size, n - i) for i in range(0, n, chunk_size)]
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    offsets = np.cumsum([0] + sizes[:-1])
    jobs = list(zip(sizes, seqs, offsets))

    def run(job):
        size, seq, off = job
        return _run_chunk(params, sampler, size, dt, n_steps, seq, record_steps, int(off))

    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    particles = np.concatenate([r[0] for r in results])
    snapshots = {t: np.concatenate([r[1][t] for r in results]) for t in record_steps.values()}
    return EnsembleState(particles, n_steps * dt, seed, chunk_size, snapshots)


def empirical_density(state: EnsembleState | np.ndarray, grid: Grid) -> DensityOnGrid:
    """Histogram normalized by the total particle count and the cell widths."""
    v = state.particles if isinstance(state, EnsembleState) else np.asarray(state)
    counts, _ = np.histogram(v, bins=grid.edges)
    return DensityOnGrid(grid, counts / (v.size * grid.widths))


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    mean_se: float
    m2: float
    m2_se: float


def moments(v: np.ndarray) -> MomentEstimate:
    n = v.size
    sq = v * v
    return MomentEstimate(
        float(v.mean()),
        float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf,
        float(sq.mean()),
        float(sq.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf,
    )


def write_snapshot_csv(state: EnsembleState | np.ndarray, path) -> None:
    v = state.particles if isinstance(state, EnsembleState) else np.asarray(state)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle_index", "v"])
        for i, x in enumerate(v):
            w.writerow([i, repr(float(x))])
