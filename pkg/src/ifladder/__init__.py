"""Influence functions along the curvature approximation ladder: Hessian, GGN, block GGN, EK-FAC, K-FAC."""

__version__ = "0.1.0"
