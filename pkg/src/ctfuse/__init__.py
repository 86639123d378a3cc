"""Continuous-time multi-sensor trajectory smoothing on cumulative B-splines."""

__version__ = "0.1.0"
