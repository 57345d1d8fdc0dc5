"""Numerical laboratory for delta-Bose semigroups, finite-dimensional
Gaussian multiplicative chaos, and critical 2D polymer ensembles."""

__version__ = "0.1.0"
