"""Bi-level Volt-VAR optimisation for unbalanced radial distribution feeders."""

__version__ = "0.1.0"
