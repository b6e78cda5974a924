"""Desk-scale diffusion engine with encoder-feature caching and parallel decoding."""

__version__ = "0.1.0"
