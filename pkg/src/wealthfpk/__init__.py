"""Numerical laboratory for the wealth Fokker-Planck equation with debts."""

from .model import DIVERGENT, NO_GUARANTEE, ModelParams
from .grid import DensityOnGrid, Grid, build_grid, l1_distance, observables, project

__version__ = "0.1.0"

DEFAULT_GRID = dict(v_min=-10.0, v_max=5000.0, n_cells=4000, stretch=1000.0)
