"""Permutation-invariant multi-view shape recognition and retrieval."""

__version__ = "0.1.0"
