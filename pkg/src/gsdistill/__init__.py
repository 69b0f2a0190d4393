"""Desk-scale multi-view diffusion distilled into 3D Gaussian splats."""

__version__ = "0.1.0"
