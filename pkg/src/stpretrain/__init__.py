"""Masked spatio-temporal autoencoder pre-training with hypergraph capsule clustering."""

__version__ = "0.1.0"
