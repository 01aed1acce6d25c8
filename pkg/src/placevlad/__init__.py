"""Attention-weighted VLAD descriptors for cross-domain place recognition."""

__version__ = "0.1.0"
