"""Distributed gradient-free aggregative optimization."""

__version__ = "0.1.0"
