"""Benchmark suite for function-space variational inference on Bayesian linear regression."""

__version__ = "0.1.0"
