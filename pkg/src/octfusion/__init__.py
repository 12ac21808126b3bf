"""Paired OCT volume / en face masked-autoencoder pre-training and evaluation."""

__version__ = "0.1.0"
