"""Weak derivative correlations and linearization of wide networks."""

__version__ = "0.1.0"
