"""Adaptive step-count selection for a toy conditional diffusion sampler."""

__version__ = "0.1.0"
