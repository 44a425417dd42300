"""Latent goal-guided multi-agent RL laboratory."""

__version__ = "0.1.0"
