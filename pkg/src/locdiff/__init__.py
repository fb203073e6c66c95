"""Localized score-based diffusion models: samplers, exact Gaussian oracles and experiments."""

__version__ = "0.1.0"
