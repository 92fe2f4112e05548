"""Probabilistic caching at base stations under heterogeneous user demand."""

__version__ = "0.1.0"
