"""Masked-autoencoder reconstruction of hyperspectral cubes from partial spectral observations."""

__version__ = "0.1.0"
