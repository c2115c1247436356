"""Adversarial image generation by pivotal tuning of a style-based generator,
with a desk-scale benchmark around it."""

__version__ = "0.1.0"
