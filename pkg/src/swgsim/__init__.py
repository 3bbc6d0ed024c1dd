"""Guidance simulations on finite-dataset diffusion models."""

__version__ = "0.1.0"
