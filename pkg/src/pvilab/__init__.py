"""Obstacle problems with quadrature-perturbed higher-order finite elements,
plus a finite-dimensional engine for the perturbation bounds."""

__version__ = "0.1.0"
