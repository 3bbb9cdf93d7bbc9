"""Bayesian spatial regression for dispersed counts with the gamma-count likelihood."""

__version__ = "0.1.0"
