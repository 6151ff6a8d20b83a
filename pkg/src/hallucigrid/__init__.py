"""Completing partially observed road grids from unpaired prior knowledge."""

__version__ = "0.1.0"
