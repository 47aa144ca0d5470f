"""Adversarial RRT* planning with a learned motion discriminator."""

__version__ = "0.1.0"
