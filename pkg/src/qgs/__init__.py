"""Desk-scale query-conditioned generative search ranking."""

__version__ = "0.1.0"
