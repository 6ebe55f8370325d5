"""Distributional evaluation of black-box stochastic systems with Dirichlet
logistic Gaussian processes."""

__version__ = "0.1.0"
