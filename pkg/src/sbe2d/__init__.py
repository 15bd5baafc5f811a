"""Simulation and verification toolkit for the two-dimensional generalized stochastic Burgers equation."""

__version__ = "0.1.0"
