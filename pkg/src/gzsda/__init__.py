"""Generalized zero-shot domain adaptation with a coupled conditional VAE."""

__version__ = "0.1.0"
