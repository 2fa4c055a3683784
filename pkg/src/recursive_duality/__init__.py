"""Convex-duality solver and Monte Carlo verifier for recursive utility
maximization with concave wealth drifts and a K-ignorance driver."""

from .engine import McEstimate, PathBatch, TimeGrid, simulate_brownian
from .market import DriftCase, MarketSpec, PreferenceSpec, TimeFunction
from .solver import assemble_saddle, large_investor_closed_form, solve_dual

__all__ = [
    "DriftCase",
    "MarketSpec",
    "McEstimate",
    "PathBatch",
    "PreferenceSpec",
    "TimeFunction",
    "TimeGrid",
    "assemble_saddle",
    "large_investor_closed_form",
    "simulate_brownian",
    "solve_dual",
]

__version__ = "0.1.0"
