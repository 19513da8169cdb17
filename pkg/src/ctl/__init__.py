"""Contrastive texture learning for grayscale patch classification."""

__version__ = "0.1.0"
