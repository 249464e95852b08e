"""Contrastive analysis toolkit: learn, regularize and score common/salient latent factors."""

__version__ = "0.1.0"
