"""Latent noise segmentation: perceptual grouping from autoencoder latent noise."""

__version__ = "0.1.0"
