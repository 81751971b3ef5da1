"""Structured pruning laboratory for a desk-scale decoder transformer."""

__version__ = "0.1.0"
