"""Dynamical random walks driven by expanding circle maps with gates."""
__version__ = "0.1.0"
