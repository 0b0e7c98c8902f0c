"""Differentiable full-reference quality metrics, score attacks and perturbation analysis."""

__version__ = "0.1.0"
