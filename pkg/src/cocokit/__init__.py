"""Collaborative-representation classifiers and a small CNN trained through a
collaborative reconstruction layer."""

__version__ = "0.1.0"
