"""Bidirectional reward-guided diffusion fine-tuning for super-resolution, at desk scale."""

__version__ = "0.1.0"
