"""Deepfake video detection from the temporal flow of GAN-inversion style latents."""

__version__ = "0.1.0"
