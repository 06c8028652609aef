"""Inverse obstacle scattering with latent implicit surfaces."""

__version__ = "0.1.0"
