"""Convolutional networks built from quasi-linear hyperbolic residual blocks."""

__version__ = "0.1.0"
