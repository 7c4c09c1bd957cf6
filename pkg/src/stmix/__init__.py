"""Bayesian spatio-temporal log-normal mixtures for grouped income data."""

__version__ = "0.1.0"
