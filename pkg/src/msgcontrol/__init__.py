"""LQG glycemic control on a minimal stochastic glucose model."""
__version__ = "0.1.0"
