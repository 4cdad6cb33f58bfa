"""Pseudo-label neural collaborative filtering with dual embedding spaces."""

__version__ = "0.1.0"
