"""Continuous chain-of-thought training and adaptive routing, desk scale."""

__version__ = "0.1.0"
