"""Spatio-temporal graph-convolution refinement of 3D skeleton sequences."""

__version__ = "0.1.0"
