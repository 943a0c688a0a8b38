"""Parallel Cyclic Reduction for Markov sequences (DeepPCR)."""

__version__ = "0.1.0"
