"""Sequence-aware factorization machines with a numpy forward/backward pass."""

__version__ = "0.1.0"
