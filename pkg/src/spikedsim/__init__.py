"""Gradient-flow learning of single index models under spiked covariance."""

__version__ = "0.1.0"
