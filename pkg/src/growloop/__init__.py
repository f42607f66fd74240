"""Desk-scale lab for entropy-guided depth growth in looped transformers."""

__version__ = "0.1.0"
