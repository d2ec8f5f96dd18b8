"""Learnable norm-based pooling for GNNs, with synthetic extrapolation benchmarks."""

__version__ = "0.1.0"
