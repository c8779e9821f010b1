"""Bayesian model averaging and mixing of imperfect model predictions."""

__version__ = "0.1.0"
