"""Contrastive volumetric age estimation on synthetic aging phantoms."""

__version__ = "0.1.0"
