"""Variational stochastic differential networks for sporadic time series."""

__version__ = "0.1.0"
