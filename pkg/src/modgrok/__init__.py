"""Numerical workbench for a two-layer quadratic network learning modular addition."""

__version__ = "0.1.0"
