"""Hybrid DC + Gaussian-process surrogate for chance-constrained OPF."""

__version__ = "0.1.0"
