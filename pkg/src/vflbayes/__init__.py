"""Bayesian inference for vertically partitioned data."""
__version__ = "0.1.0"
