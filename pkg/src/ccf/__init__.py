"""Collaborative-competitive filtering: conditional reaction models and action optimization."""

__version__ = "0.1.0"
