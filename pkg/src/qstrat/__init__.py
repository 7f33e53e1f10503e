"""Numerical tools for Q-valued Dirichlet minimizers and quantitative stratification."""

from .aq_space import QPoint, eta_mean, g_distance, norm, recenter, support_multiplicities
from .qfield import BallSpec, Grid, QField, load_field, make_branch_field, save_field

__all__ = [
    "QPoint", "g_distance", "eta_mean", "recenter", "norm", "support_multiplicities",
    "Grid", "BallSpec", "QField", "make_branch_field", "save_field", "load_field",
]
__version__ = "0.1.0"
