"""Closed-loop camera-attack benchmark for a desk-scale driving simulator, with the AD² detector and baselines."""

__version__ = "0.1.0"
