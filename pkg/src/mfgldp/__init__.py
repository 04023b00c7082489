"""Numerical laboratory for linear-quadratic mean field games and their large deviations."""

__version__ = "0.1.0"
