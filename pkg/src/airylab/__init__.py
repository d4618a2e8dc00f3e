"""Numerical laboratory for Airy line ensemble densities and nonintersecting bridges."""

__version__ = "0.1.0"

from .core import alpha_k, max_g_over_dbeta, opt_g, s_functional, tetris, theta
from .grid import FunctionTuple, GridFunction

__all__ = [
    "FunctionTuple",
    "GridFunction",
    "alpha_k",
    "max_g_over_dbeta",
    "opt_g",
    "s_functional",
    "tetris",
    "theta",
]
