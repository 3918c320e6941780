"""Run configuration: TOML in, fully defaulted tree out."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w
from scipy import stats

from .grid import DensityOnGrid, Grid, build_grid, project, project_equilibrium, read_density_csv, remap
from .model import ModelParams

SHIPPED = Path(__file__).with_name("configs")

FAMILIES = ("gaussian", "box", "two_box_debt", "equilibrium", "custom_csv")

DEFAULTS: dict[str, Any] = {
    "seed": 12345,
    "params": {"lambda": 1.0, "sigma": 1.0},
    "grid": {"v_min": -10.0, "v_max": 5000.0, "n_cells": 4000, "stretch": 1000.0},
    "initial": {"family": "gaussian", "mean": 1.0, "sd": 1.0},
    "solver": {"dt": 0.01, "t_end": 50.0, "theta": 1.0, "record_every": 10},
    "monitors": [],
    "decay": {
        "s": [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
        "alpha": [0.25, 0.5, 0.75],
        "t_end": 12.0,
        "record_every": 10,
    },
    "crossval": {"n_particles": 1_000_000, "dt": 1e-3, "checkpoints": [1.0, 2.0, 5.0]},
}

FAMILY_DEFAULTS: dict[str, dict] = {
    "gaussian": {"mean": 1.0, "sd": 1.0},
    "box": {"a": -0.5, "b": 2.5},
    "two_box_debt": {"debt_a": -1.0, "debt_b": 0.0, "debt_mass": 0.3, "width": 1.0},
    "equilibrium": {},
    "custom_csv": {"path": ""},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a table")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _number(tree: dict, path: str, positive: bool = False, integer: bool = False) -> float:
    node: Any = tree
    for part in path.split("."):
        node = node[part]
    ok = isinstance(node, (int, float)) and not isinstance(node, bool) and math.isfinite(node)
    if integer:
        ok = ok and float(node).is_integer()
    if not ok:
        raise ConfigError(f"{path}: expected a finite {'integer' if integer else 'number'}, got {node!r}")
    if positive and node <= 0:
        raise ConfigError(f"{path}: must be positive, got {node!r}")
    return int(node) if integer else float(node)


@dataclass(frozen=True)
class RunConfig:
    tree: dict

    @classmethod
    def from_dict(cls, raw: dict | None = None) -> "RunConfig":
        raw = dict(raw or {})
        initial = raw.pop("initial", {})
        if not isinstance(initial, dict):
            raise ConfigError("initial: expected a table")
        family = initial.get("family", DEFAULTS["initial"]["family"])
        if family not in FAMILIES:
            raise ConfigError(f"initial.family: {family!r} not one of {', '.join(FAMILIES)}")
        tree = _merge({k: v for k, v in DEFAULTS.items() if k != "initial"}, raw)
        fam_base = {"family": family, **FAMILY_DEFAULTS[family]}
        tree["initial"] = _merge(fam_base, initial, "initial.")
        cfg = cls(tree)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        path = Path(path)
        if not path.exists() and (SHIPPED / path.name).exists() and path.parent == Path("."):
            path = SHIPPED / path.name
        try:
            raw = tomli.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = cls.from_dict(raw)
        ini = cfg.tree["initial"]
        if ini["family"] == "custom_csv" and not Path(ini["path"]).is_absolute():
            ini["path"] = str((path.parent / ini["path"]).resolve())
        return cfg

    def dumps(self) -> str:
        return tomli_w.dumps(self.tree)

    def validate(self) -> None:
        t = self.tree
        if not isinstance(t["seed"], int) or isinstance(t["seed"], bool) or t["seed"] < 0:
            raise ConfigError(f"seed: expected a nonnegative integer, got {t['seed']!r}")
        try:
            self.params
        except ValueError as exc:
            raise ConfigError(f"params: {exc}") from None
        vmin = _number(t, "grid.v_min")
        vmax = _number(t, "grid.v_max")
        n = _number(t, "grid.n_cells", positive=True, integer=True)
        stretch = _number(t, "grid.stretch", positive=True)
        if not vmin < 0 < 1 < vmax:
            raise ConfigError(f"grid: need v_min < 0 < 1 < v_max, got [{vmin}, {vmax}]")
        if n < 3:
            raise ConfigError("grid.n_cells: at least 3 cells are needed to place edges at 0 and 1")
        if stretch < 1:
            raise ConfigError("grid.stretch: must be >= 1")
        _number(t, "solver.dt", positive=True)
        if _number(t, "solver.t_end") < 0:
            raise ConfigError("solver.t_end: must be nonnegative")
        theta = _number(t, "solver.theta")
        if not 0.5 <= theta <= 1.0:
            raise ConfigError("solver.theta: must lie in [0.5, 1]")
        _number(t, "solver.record_every", positive=True, integer=True)
        if not isinstance(t["monitors"], list) or not all(isinstance(m, str) for m in t["monitors"]):
            raise ConfigError("monitors: expected a list of strings")
        for key in ("s", "alpha"):
            vals = t["decay"][key]
            if not isinstance(vals, list) or not all(isinstance(x, (int, float)) for x in vals):
                raise ConfigError(f"decay.{key}: expected a list of numbers")
        if any(not 0 < a < 1 for a in t["decay"]["alpha"]):
            raise ConfigError("decay.alpha: values must lie in (0, 1)")
        if any(s <= 0 for s in t["decay"]["s"]):
            raise ConfigError("decay.s: values must be positive")
        _number(t, "decay.t_end", positive=True)
        _number(t, "decay.record_every", positive=True, integer=True)
        _number(t, "crossval.n_particles", positive=True, integer=True)
        _number(t, "crossval.dt", positive=True)
        cps = t["crossval"]["checkpoints"]
        if not isinstance(cps, list) or not cps or not all(isinstance(x, (int, float)) and x >= 0 for x in cps):
            raise ConfigError("crossval.checkpoints: expected a nonempty list of nonnegative times")
        self._validate_initial()

    def _validate_initial(self) -> None:
        ini = self.tree["initial"]
        fam = ini["family"]
        if fam == "gaussian":
            _number(self.tree, "initial.mean")
            _number(self.tree, "initial.sd", positive=True)
        elif fam == "box":
            if not _number(self.tree, "initial.a") < _number(self.tree, "initial.b"):
                raise ConfigError("initial: need a < b")
        elif fam == "two_box_debt":
            if not _number(self.tree, "initial.debt_a") < _number(self.tree, "initial.debt_b") <= 0:
                raise ConfigError("initial: need debt_a < debt_b <= 0")
            m = _number(self.tree, "initial.debt_mass")
            if not 0 < m < 1:
                raise ConfigError("initial.debt_mass: must lie in (0, 1)")
            _number(self.tree, "initial.width", positive=True)
        elif fam == "custom_csv":
            if not isinstance(ini["path"], str) or not ini["path"]:
                raise ConfigError("initial.path: a CSV path is required for custom_csv")

    @property
    def params(self) -> ModelParams:
        p = self.tree["params"]
        return ModelParams(p["lambda"], p["sigma"])

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        tree = copy.deepcopy(self.tree)
        tree["seed"] = int(seed)
        return RunConfig.from_dict(tree)

    def grid(self) -> Grid:
        g = self.tree["grid"]
        return build_grid(g["v_min"], g["v_max"], int(g["n_cells"]), g["stretch"])


def two_box_layout(ini: dict) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """``(a, b, weight)`` for the debt box and for the wealth box placed so the mean is 1."""
    a, b, m, width = ini["debt_a"], ini["debt_b"], ini["debt_mass"], ini["width"]
    center = (1.0 - m * 0.5 * (a + b)) / (1.0 - m)
    return (a, b, m), (center - 0.5 * width, center + 0.5 * width, 1.0 - m)


def initial_density(cfg: RunConfig, grid: Grid) -> DensityOnGrid:
    ini = cfg.tree["initial"]
    fam = ini["family"]
    if fam == "gaussian":
        mean, sd = ini["mean"], ini["sd"]
        return project(lambda v: stats.norm.pdf(v, mean, sd), grid)
    if fam == "box":
        return _boxes(grid, [(ini["a"], ini["b"], 1.0)])
    if fam == "two_box_debt":
        return _boxes(grid, list(two_box_layout(ini)))
    if fam == "equilibrium":
        return project_equilibrium(cfg.params, grid)
    src = read_density_csv(ini["path"])
    return remap(src, grid)


def _boxes(grid: Grid, boxes: list[tuple[float, float, float]]) -> DensityOnGrid:
    """Boxes deposited so that cell-center mass and mean are exact.

    Each cell's overlap mass sits at the overlap centroid; it is shared
    linearly between the two nearest cell centers, which changes only the
    cells cut by a box edge.
    """
    mass = np.zeros(grid.n_cells)
    lo, hi = grid.edges[:-1], grid.edges[1:]
    c = grid.centers
    idx = np.arange(grid.n_cells, dtype=float)
    for a, b, w in boxes:
        left, right = np.maximum(lo, a), np.minimum(hi, b)
        overlap = np.clip(right - left, 0.0, None)
        hit = overlap > 0
        m = w / (b - a) * overlap[hit]
        pos = np.interp(0.5 * (left[hit] + right[hit]), c, idx)
        i0 = np.minimum(np.floor(pos).astype(int), grid.n_cells - 2)
        frac = pos - i0
        np.add.at(mass, i0, m * (1.0 - frac))
        np.add.at(mass, i0 + 1, m * frac)
    return DensityOnGrid(grid, mass / grid.widths)


def initial_moments(cfg: RunConfig) -> tuple[float, float] | None:
    """Exact mean and second moment of the configured initial law, when closed form."""
    ini = cfg.tree["initial"]
    fam = ini["family"]
    if fam == "gaussian":
        return ini["mean"], ini["mean"] ** 2 + ini["sd"] ** 2
    if fam in ("box", "two_box_debt"):
        boxes = [(ini["a"], ini["b"], 1.0)] if fam == "box" else list(two_box_layout(ini))
        m1 = sum(w * 0.5 * (a + b) for a, b, w in boxes)
        m2 = sum(w * (a * a + a * b + b * b) / 3.0 for a, b, w in boxes)
        return m1, m2
    if fam == "equilibrium":
        mu = cfg.params.mu
        return 1.0, (mu - 1.0) / (mu - 2.0) if mu > 2 else math.inf
    return None


def shipped_configs() -> list[Path]:
    return sorted(SHIPPED.glob("*.toml"))
