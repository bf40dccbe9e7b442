"""Hierarchical neural constructive solver for the Euclidean TSP."""

__version__ = "0.1.0"
