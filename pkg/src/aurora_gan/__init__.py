"""Text-conditioned GAN generator with sparse mixture-of-experts attention blocks."""

__version__ = "0.1.0"
