"""Sinkhorn-divergence flow generator and one-class anomaly detector."""

__version__ = "0.1.0"
