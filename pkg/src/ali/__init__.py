"""Augmented latent intrinsics: a desk-scale relighting pipeline."""

__version__ = "0.1.0"
