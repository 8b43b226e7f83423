"""Mixtures of conditional normalizing flows for point-set distributions."""
__version__ = "0.1.0"
