"""Numerical pipeline for multi-well magnetic Schrodinger operators on grids."""

__version__ = "0.1.0"
