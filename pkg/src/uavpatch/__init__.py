"""Adversarial patch attack and occlusion-removal defense for aerial vehicle detection."""

__version__ = "0.1.0"
