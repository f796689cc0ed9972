"""Masked diffusion training and streaming block-wise token generation."""

__version__ = "0.1.0"
