"""Contraction-metric toolbox: convex metric synthesis, robust controllers and
estimators, neural metric models, adaptive laws, and tube-bound verification."""

__version__ = "0.1.0"
