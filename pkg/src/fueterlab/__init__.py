"""Numerical laboratory for Fueter maps on 3-manifolds."""

__version__ = "0.1.0"
