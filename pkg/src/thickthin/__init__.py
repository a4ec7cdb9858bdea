"""Thick-thin (bubble) decompositions of measured constant-curvature surfaces."""

__version__ = "0.1.0"
