"""Differentiable bundle adjustment with an implicit backward pass, plus
gradient-variance experiments and a minimal predictor trainer."""

__version__ = "0.1.0"
