"""Desk-scale diffusion-transformer inference engine with error-aware
attention caching, PCA-based query/key slicing, and a unified dispatcher."""

__version__ = "0.1.0"
