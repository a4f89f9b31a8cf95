"""Cooperative mean / Gamma-variance / Bayesian networks for disentangled regression uncertainty."""

__version__ = "0.1.0"
