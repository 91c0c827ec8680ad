"""Diffusion-based neural samplers for Boltzmann densities."""
__version__ = "0.1.0"
