"""Paired lesion/brain diffusion for unified brain-image generation and editing at desk scale."""

__version__ = "0.1.0"
