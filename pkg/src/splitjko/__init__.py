"""Splitting transport / JKO scheme for nonlinear diffusion with a
non-gradient drift."""
from .kernels import BACKEND
from .measures import Domain, EnergySpec, GridMeasure, entropy, linear, power

__version__ = "0.1.0"

__all__ = ["BACKEND", "Domain", "EnergySpec", "GridMeasure", "entropy", "linear", "power"]
