"""Noise-disturbance detection of diffusion samples, with its mixture-fitting theory and a reconstruction baseline."""

__version__ = "0.1.0"
