"""Metric-based anisotropic adaptation for simplex stochastic collocation."""

__version__ = "0.1.0"
