"""Attention-based encoder-decoder translation with coverage-aware attention."""

__version__ = "0.1.0"
