"""Compressed activation/gradient exchange for pipeline model-parallel training."""

__version__ = "0.1.0"
